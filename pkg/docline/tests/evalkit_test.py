import logging
import os
import tempfile
import unittest
from pathlib import Path

import numpy as np
from PIL import Image

from docline.doclib.batch import encode_document
from docline.doclib.ocr import parse_ocr
from docline.doclib.tokenizer import Tokenizer
from docline.docgen.generator import generate_document
from docline.encoders.params import init_params
from docline.errors import DataError, UsageError
from docline.evalkit.alignment import AlignmentReport, align_document, align_features, alignment_accuracy
from docline.evalkit.classify import classify_document, finetune_document_classifier, zero_head
from docline.evalkit.ner import (
    OUTSIDE,
    FinetuneConfig,
    TagSet,
    bio_spans,
    entity_scores,
    finetune_token_classifier,
    token_labels,
)
from docline.evalkit.render import CORRECT_COLOR, WRONG_COLOR, render_alignment
from docline.tests.helpers import MICRO_GEN, micro_config, micro_documents, unit_rows


def colored_pixels(path: Path, color: tuple[int, int, int]) -> int:
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"))
    return int(np.all(pixels == np.array(color, dtype=np.uint8), axis=-1).sum())


class TestAlignment(unittest.TestCase):

    def test_orthonormal_features_align(self) -> None:
        rows = np.eye(6)
        result = align_features("d", rows, rows, np.ones(6, dtype=bool))
        self.assertEqual(result.accuracy, 1.0)
        self.assertEqual(result.region_accuracy, 1.0)
        self.assertFalse(result.trivial)

    def test_random_features_are_at_chance(self) -> None:
        rng = np.random.default_rng(0)
        mask = np.ones(8, dtype=bool)
        hits = [align_features("d", unit_rows(rng, 8, 4), unit_rows(rng, 8, 4), mask).accuracy for _ in range(10_000)]
        self.assertAlmostEqual(float(np.mean(hits)), 1 / 8, delta=0.02)

    def test_single_line_is_trivial(self) -> None:
        result = align_features("d", np.ones((4, 3)), -np.ones((4, 3)), np.array([True, False, False, False]))
        self.assertTrue(result.trivial)
        self.assertEqual(result.accuracy, 1.0)

    def test_ties_go_to_the_lowest_index(self) -> None:
        rho = np.ones((3, 2))
        result = align_features("d", rho, np.ones((3, 2)), np.ones(3, dtype=bool))
        self.assertEqual(result.predicted, [0, 0, 0])
        self.assertEqual(result.correct, [True, False, False])

    def test_padding_and_rescaling_do_not_change_predictions(self) -> None:
        rng = np.random.default_rng(1)
        rho, tau = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        base = align_features("d", rho, tau, np.ones(5, dtype=bool))
        padded_rho = np.vstack([rho, 100.0 * np.ones((3, 4))])
        padded_tau = np.vstack([tau, 100.0 * np.ones((3, 4))])
        padded = align_features("d", padded_rho, padded_tau, np.r_[np.ones(5, dtype=bool), np.zeros(3, dtype=bool)])
        scaled = align_features("d", 3.0 * rho, 0.25 * tau, np.ones(5, dtype=bool))
        for other in (padded, scaled):
            self.assertEqual(other.predicted, base.predicted)
            self.assertEqual(other.region_predicted, base.region_predicted)

    def test_corpus_accuracy_weights_lines(self) -> None:
        big = align_features("a", np.eye(4), np.eye(4), np.ones(4, dtype=bool))
        small = align_features("b", np.ones((2, 2)), np.ones((2, 2)), np.ones(2, dtype=bool))
        report = AlignmentReport(documents=[big, small])
        self.assertEqual(report.accuracy, (4 + 1) / 6)
        self.assertEqual(report.real_lines, 6)

    def test_report_round_trip(self) -> None:
        report = AlignmentReport(documents=[
            align_features("a", np.eye(3), np.eye(3), np.ones(3, dtype=bool)),
            align_features("b", np.ones((2, 2)), np.ones((2, 2)), np.ones(2, dtype=bool)),
        ])
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "alignment.jsonl")
            report.save(path)
            with open(path) as f:
                self.assertEqual(len(f.read().splitlines()), 2)
            self.assertEqual(AlignmentReport.load(path), report)
            self.assertEqual(report.entry("b").accuracy, 0.5)
            with self.assertRaises(DataError):
                report.entry("c")

    def test_model_alignment(self) -> None:
        cfg = micro_config()
        params = init_params(cfg, 0)
        docs = micro_documents(3)
        report = alignment_accuracy(params, cfg, docs, threads=2)
        self.assertEqual([d.doc_id for d in report.documents], [d.doc_id for d in docs])
        for entry, doc in zip(report.documents, docs):
            self.assertEqual(entry.real_lines, len(doc.textlines))
            self.assertTrue(all(0 <= p < entry.real_lines for p in entry.predicted))
        self.assertEqual(align_document(params, cfg, docs[0]), report.documents[0])
        with self.assertRaises(DataError):
            alignment_accuracy(params, cfg, [])


class TestRenderAlignment(unittest.TestCase):

    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.doc = micro_documents(1)[0]
        lines = len(self.doc.textlines)
        self.correct = align_features(self.doc.doc_id, np.eye(lines), np.eye(lines), np.ones(lines, dtype=bool))

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_all_correct_is_green(self) -> None:
        path = render_alignment(self.doc, self.correct, Path(self.tmp.name) / f"{self.doc.doc_id}.png")
        self.assertGreater(colored_pixels(path, CORRECT_COLOR), 0)
        self.assertEqual(colored_pixels(path, WRONG_COLOR), 0)

    def test_wrong_lines_are_red(self) -> None:
        lines = len(self.doc.textlines)
        wrong = align_features(self.doc.doc_id, np.ones((lines, 2)), np.ones((lines, 2)), np.ones(lines, dtype=bool))
        path = render_alignment(self.doc, wrong, Path(self.tmp.name) / "wrong.png")
        self.assertGreater(colored_pixels(path, WRONG_COLOR), 0)

    def test_rendering_is_deterministic(self) -> None:
        first = render_alignment(self.doc, self.correct, Path(self.tmp.name) / "a.png")
        second = render_alignment(self.doc, self.correct, Path(self.tmp.name) / "b.png")
        self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_box_at_page_border(self) -> None:
        record = {
            "doc_id": "edge",
            "width": 1000,
            "height": 1000,
            "coordinate_space": "layout",
            "lines": [{"words": [{"text": "a", "bbox": [0, 0, 1000, 1000]}]}],
        }
        doc = parse_ocr(record, Tokenizer.from_words(["a"]))
        entry = align_features("edge", np.ones((1, 2)), np.ones((1, 2)), np.ones(1, dtype=bool))
        path = render_alignment(doc, entry, Path(self.tmp.name) / "edge.png")
        self.assertEqual(colored_pixels(path, CORRECT_COLOR), 4 * 224 - 4)

    def test_errors(self) -> None:
        other = align_features("other", np.eye(2), np.eye(2), np.ones(2, dtype=bool))
        with self.assertRaises(DataError):
            render_alignment(self.doc, other, Path(self.tmp.name) / "x.png")
        blocker = Path(self.tmp.name) / "file"
        blocker.write_text("not a directory")
        with self.assertRaises(DataError):
            render_alignment(self.doc, self.correct, blocker / "x.png")


class TestTokenClassification(unittest.TestCase):

    def test_tag_set(self) -> None:
        tagset = TagSet.from_tags(["O", "B-X", "I-X", "B-A"])
        self.assertEqual(tagset.tags, ["O", "B-A", "I-A", "B-X", "I-X"])
        with self.assertRaises(DataError):
            TagSet.from_tags(["X-1"])
        with self.assertRaises(DataError):
            tagset.index("B-Y")

    def test_word_tags_spread_over_tokens(self) -> None:
        record = {
            "doc_id": "tags",
            "width": 1000,
            "height": 1000,
            "coordinate_space": "layout",
            "lines": [{"words": [
                {"text": "ab", "bbox": [0, 0, 100, 20], "tag": "B-X"},
                {"text": "zzz", "bbox": [120, 0, 200, 20], "tag": "I-X"},
                {"text": "ab", "bbox": [220, 0, 300, 20]},
            ]}],
        }
        doc = parse_ocr(record, Tokenizer.from_words(["ab", "z"]))
        tagset = TagSet(entity_types=["X"])
        labels = token_labels(doc, encode_document(doc), tagset)
        self.assertEqual([tagset.tags[i] if i >= 0 else None for i in labels], [None, "B-X", "I-X", "I-X", "I-X", "O"])
        with self.assertRaises(DataError):
            token_labels(doc, encode_document(doc), TagSet(entity_types=["Y"]))

    def test_bio_spans(self) -> None:
        self.assertEqual(bio_spans(["B-X", "I-X", "O", "B-Y"]), {("X", 0, 2), ("Y", 3, 4)})
        self.assertEqual(bio_spans(["I-X", "I-X", "B-X"]), {("X", 0, 2), ("X", 2, 3)})
        self.assertEqual(bio_spans(["B-X", "I-Y"]), {("X", 0, 1), ("Y", 1, 2)})
        self.assertEqual(bio_spans([OUTSIDE] * 3), set())

    def test_entity_scores(self) -> None:
        gold = [["B-X", "I-X", "O", "B-Y"], ["O", "B-X"]]
        self.assertEqual(entity_scores(gold, gold).f1, 1.0)
        predicted = [["B-X", "O", "O", "B-Y"], ["O", "B-X"]]
        scores = entity_scores(gold, predicted)
        self.assertEqual((scores.overall.correct, scores.overall.gold, scores.overall.predicted), (2, 3, 3))
        self.assertAlmostEqual(scores.f1, 2 / 3, delta=1e-12)
        self.assertEqual(scores.per_type["Y"].f1, 1.0)
        self.assertEqual(scores.per_type["X"].f1, 0.5)

    def test_all_outside_is_degenerate(self) -> None:
        with self.assertLogs(level=logging.WARNING):
            scores = entity_scores([["O", "O"]], [["B-X", "O"]])
        self.assertTrue(scores.degenerate)
        self.assertIsNone(scores.f1)

    def test_finetune_runs(self) -> None:
        cfg = micro_config()
        params = init_params(cfg, 0)
        docs = micro_documents(4, MICRO_GEN.model_copy(update={"tag_first_line": True}))
        result = finetune_token_classifier(
            params, cfg, docs[:3], TagSet(entity_types=["X"]), FinetuneConfig(epochs=2, batch_size=2, peak_lr=1e-2),
            eval_docs=docs[3:], threads=1,
        )
        self.assertEqual(result.head["ner.w"].shape, (cfg.hidden_dim, 3))
        self.assertEqual(len(result.losses), 4)
        self.assertTrue(0.0 <= result.train_scores.f1 <= 1.0)
        self.assertIsNotNone(result.eval_scores)


class TestDocumentClassification(unittest.TestCase):

    def setUp(self) -> None:
        self.cfg = micro_config()
        self.params = init_params(self.cfg, 0)
        self.doc = micro_documents(1)[0]

    def test_zero_head_gives_uniform_logits(self) -> None:
        logits = classify_document(self.params, self.cfg, self.doc, zero_head(self.cfg, 3))
        self.assertEqual(logits.shape, (3,))
        np.testing.assert_array_equal(logits, np.zeros(3))

    def test_too_few_classes(self) -> None:
        with self.assertRaises(UsageError):
            zero_head(self.cfg, 1)

    def test_finetune_runs(self) -> None:
        many = [generate_document(MICRO_GEN.model_copy(update={"label": "many", "lines_range": (5, 5)}), i) for i in range(2)]
        few = [generate_document(MICRO_GEN.model_copy(update={"label": "few", "lines_range": (1, 1)}), i) for i in range(2)]
        result = finetune_document_classifier(self.params, self.cfg, many + few, FinetuneConfig(epochs=2, batch_size=2), threads=1)
        self.assertEqual(result.classes, ["few", "many"])
        self.assertEqual(result.head["cls.w"].shape, (3 * self.cfg.hidden_dim, 2))
        self.assertTrue(0.0 <= result.train_accuracy <= 1.0)
        unlabeled = generate_document(MICRO_GEN, 0)
        with self.assertRaises(UsageError):
            finetune_document_classifier(self.params, self.cfg, [unlabeled], threads=1)


if __name__ == '__main__':
    unittest.main()
