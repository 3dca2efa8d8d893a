import itertools
import json
import os
import tempfile
import unittest

import numpy as np
from PIL import Image

from docline.doclib.batch import NO_LINE, build_batch, encode_document
from docline.doclib.bbox import BBox, GridConfig, assign_grid, denormalize_bbox, normalize_bbox
from docline.doclib.ocr import load_ocr_file, parse_ocr, serialize_document
from docline.doclib.tokenizer import CLS_ID, UNK_ID, Tokenizer
from docline.errors import BBoxError, CorpusError, OcrFormatError, TokenizerError


def tokenizer() -> Tokenizer:
    return Tokenizer.from_words(["total", "due", "tax", "ba", "ko"])


def record(lines, width=1000, height=1000, doc_id="page-1"):
    return {"doc_id": doc_id, "width": width, "height": height, "lines": lines}


def line(*boxes, texts=None):
    texts = texts or ["ba"] * len(boxes)
    return {"words": [{"text": text, "bbox": list(box)} for text, box in zip(texts, boxes)]}


class TestBBox(unittest.TestCase):

    def test_worked_normalizations(self) -> None:
        self.assertEqual(normalize_bbox((0, 0, 640, 480), 640, 480).as_list(), [0, 0, 1000, 1000])
        self.assertEqual(normalize_bbox((112, 112, 224, 224), 224, 224).as_list(), [500, 500, 1000, 1000])
        point = normalize_bbox((10, 10, 10, 10), 224, 224)
        self.assertEqual((point.width, point.height), (0, 0))

    def test_inverted_and_out_of_range(self) -> None:
        with self.assertRaises(BBoxError):
            normalize_bbox((20, 0, 10, 5), 100, 100)
        with self.assertRaises(BBoxError) as ctx:
            normalize_bbox((0, 0, 101, 5), 100, 100)
        self.assertIn("box out of range", str(ctx.exception))

    def test_monotone_and_idempotent_at_layout_scale(self) -> None:
        for c in range(0, 1001, 37):
            self.assertEqual(normalize_bbox((c, c, c, c), 1000, 1000).as_list(), [c] * 4)
        values = [normalize_bbox((c, 0, 333, 1), 333, 7).x0 for c in range(0, 334)]
        self.assertEqual(values, sorted(values))

    def test_denormalize_covers_the_layout_box(self) -> None:
        self.assertEqual(denormalize_bbox(BBox.of((0, 0, 1000, 1000)), 224, 224), (0, 0, 224, 224))
        self.assertEqual(denormalize_bbox(BBox.of((500, 500, 501, 501)), 224, 224), (112, 112, 113, 113))
        self.assertEqual(denormalize_bbox(BBox.of((250, 0, 250, 0)), 224, 224), (56, 0, 56, 0))

    def test_bbox_rejects_inverted(self) -> None:
        with self.assertRaises(ValueError):
            BBox(x0=5, y0=0, x1=4, y1=0)

    def test_assign_grid_worked_cells(self) -> None:
        grid = GridConfig()
        self.assertEqual(assign_grid(BBox.of((0, 0, 0, 0)), grid), 0)
        self.assertEqual(assign_grid(BBox.of((400, 400, 600, 600)), grid), 24)
        self.assertEqual(assign_grid(BBox.of((998, 998, 1000, 1000)), grid), 48)
        self.assertEqual(assign_grid(BBox.of((1000, 1000, 1000, 1000)), grid), 48)

    def test_assign_grid_interior_centers(self) -> None:
        grid = GridConfig(rows=3, cols=5)
        for index in range(grid.size):
            cell = grid.cell_bbox(index)
            cx, cy = cell.center
            box = BBox.of((int(cx), int(cy), int(cx), int(cy)))
            self.assertEqual(assign_grid(box, grid), index)

    def test_grid_needs_two_cells(self) -> None:
        with self.assertRaises(ValueError):
            GridConfig(rows=1, cols=1)


class TestTokenizer(unittest.TestCase):

    def test_whole_word_and_fallback(self) -> None:
        tok = tokenizer()
        self.assertEqual(len(tok.encode_word("total")), 1)
        self.assertEqual(tok.encode_word("tab"), [tok.ids["t"], tok.ids["a"], tok.ids["b"]])
        self.assertEqual(tok.encode_word("z"), [UNK_ID])
        self.assertEqual(tok.ids["[CLS]"], CLS_ID)

    def test_special_tokens_are_never_words(self) -> None:
        self.assertEqual(len(tokenizer().encode_word("[MASK]")), len("[MASK]"))

    def test_save_load(self) -> None:
        tok = tokenizer()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "vocab.json")
            tok.save(path)
            self.assertEqual(Tokenizer.load(path).tokens, tok.tokens)
            with self.assertRaises(TokenizerError):
                Tokenizer.load(os.path.join(tmp, "missing.json"))

    def test_rejects_bad_vocabulary(self) -> None:
        with self.assertRaises(TokenizerError):
            Tokenizer(["a", "b"])


class TestParseOcr(unittest.TestCase):

    def test_single_word(self) -> None:
        payload = record([line((50, 20, 150, 40), texts=["TOTAL"])], width=200, height=100)
        doc = parse_ocr(payload, tokenizer())
        self.assertEqual(len(doc.textlines), 1)
        self.assertEqual(doc.textlines[0].line_bbox.as_list(), [250, 200, 750, 400])
        self.assertEqual(doc.image.shape, (1, 224, 224))

    def test_line_and_word_ordering(self) -> None:
        payload = record([
            line((600, 100, 700, 120), (500, 100, 590, 120), texts=["due", "total"]),
            line((100, 100, 200, 120)),
            line((100, 50, 200, 70)),
        ])
        doc = parse_ocr(payload, tokenizer())
        self.assertEqual([l.line_bbox.x0 for l in doc.textlines], [100, 100, 500])
        self.assertEqual([l.line_bbox.y0 for l in doc.textlines], [50, 100, 100])
        self.assertEqual([w.text for w in doc.textlines[2].words], ["total", "due"])
        self.assertEqual([l.line_index for l in doc.textlines], [0, 1, 2])

    def test_identical_lines_keep_record_order(self) -> None:
        payload = record([line((0, 0, 10, 10), texts=["due"]), line((0, 0, 10, 10), texts=["tax"])])
        self.assertEqual([l.words[0].text for l in parse_ocr(payload, tokenizer()).textlines], ["due", "tax"])

    def test_errors(self) -> None:
        with self.assertRaises(BBoxError) as ctx:
            parse_ocr(record([line((0, 0, 1200, 10))]), tokenizer())
        self.assertIn("box out of range", str(ctx.exception))
        with self.assertRaises(OcrFormatError):
            parse_ocr(record([]), tokenizer())
        with self.assertRaises(OcrFormatError):
            parse_ocr({"doc_id": "x", "lines": []}, tokenizer())
        with self.assertRaises(OcrFormatError):
            parse_ocr(record([line((0, 0, 10, 10), texts=["  "])]), tokenizer())

    def test_unknown_fields_ignored_and_line_box_widened(self) -> None:
        payload = record([{"bbox": [0, 0, 5, 5], "confidence": 0.9, "words": [{"text": "ba", "bbox": [0, 0, 20, 10]}]}])
        payload["engine"] = "tesseract"
        doc = parse_ocr(payload, tokenizer())
        self.assertTrue(doc.textlines[0].line_bbox.contains(doc.textlines[0].words[0].bbox))

    def test_word_count_is_preserved(self) -> None:
        rng = np.random.default_rng(0)
        lines = [line(*[(x * 100, y * 50, x * 100 + 80, y * 50 + 20) for x in range(rng.integers(1, 6))])
                 for y in range(12)]
        doc = parse_ocr(record(lines), tokenizer())
        self.assertEqual(sum(len(l.words) for l in doc.textlines), sum(len(l["words"]) for l in lines))

    def test_serialize_round_trip(self) -> None:
        payload = record([
            line((50, 20, 150, 40), (10, 20, 40, 40), texts=["total", "xyz"]),
            line((10, 500, 90, 530), texts=["tax"]),
        ], width=333, height=777)
        payload["lines"][0]["words"][0]["tag"] = "B-SUM"
        payload["label"] = "receipt"
        doc = parse_ocr(payload, tokenizer())
        again = parse_ocr(json.loads(json.dumps(serialize_document(doc))), tokenizer(), image=doc.image)
        self.assertTrue(doc.same_as(again))

    def test_load_from_file_with_image(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            pixels = np.full((100, 200), 255, dtype=np.uint8)
            pixels[20:40, 50:150] = 0
            Image.fromarray(pixels).save(os.path.join(tmp, "page.png"))
            payload = record([line((50, 20, 150, 40))], width=200, height=100)
            payload["image"] = "page.png"
            with open(os.path.join(tmp, "page.json"), "w") as f:
                json.dump(payload, f)
            doc = load_ocr_file(os.path.join(tmp, "page.json"), tokenizer())
        self.assertEqual(doc.image.shape, (1, 224, 224))
        self.assertAlmostEqual(doc.image.max(), 1.0)
        self.assertLess(doc.image[0, 60, 112], 0.1)


class TestBuildBatch(unittest.TestCase):

    def doc_with_lines(self, count: int, words_per_line: int = 1, doc_id: str = "d"):
        lines = [line(*[(x * 30, y * 15, x * 30 + 20, y * 15 + 10) for x in range(words_per_line)])
                 for y in range(count)]
        return parse_ocr(record(lines, doc_id=doc_id), tokenizer())

    def test_line_mask(self) -> None:
        batch = build_batch([self.doc_with_lines(3)])
        self.assertEqual(batch.line_mask.shape, (1, 64))
        self.assertEqual(int(batch.line_mask.sum()), 3)
        self.assertTrue(batch.line_mask[0, :3].all())

    def test_two_documents(self) -> None:
        batch = build_batch([self.doc_with_lines(5, doc_id="a"), self.doc_with_lines(7, doc_id="b")])
        self.assertEqual(batch.line_mask.shape, (2, 64))
        self.assertEqual(batch.line_mask.sum(axis=1).tolist(), [5, 7])
        self.assertEqual(batch.token_ids.shape, (2, 8))
        self.assertFalse(batch.token_mask[0, 6:].any())

    def test_token_truncation(self) -> None:
        doc = self.doc_with_lines(60, words_per_line=10)
        self.assertEqual(doc.token_count, 600)
        encoded = encode_document(doc)
        self.assertEqual(encoded.length, 512)
        self.assertEqual(encoded.token_ids[0], CLS_ID)
        self.assertEqual(encoded.membership[0], NO_LINE)
        real = encoded.membership[encoded.membership != NO_LINE]
        for index in range(64):
            self.assertEqual(bool(encoded.line_mask[index]), bool(np.any(real == index)))
        self.assertEqual(encoded.real_lines, 52)

    def test_lines_past_cap_map_to_no_line(self) -> None:
        encoded = encode_document(self.doc_with_lines(66), max_lines=64)
        self.assertEqual(encoded.real_lines, 64)
        self.assertTrue(np.all(encoded.membership[-2:] == NO_LINE))
        self.assertTrue(np.all(encoded.membership[1:-2] == np.arange(64)))

    def test_tokens_share_word_box_and_grid(self) -> None:
        payload = record([line((100, 100, 300, 140), texts=["xyz"])])
        encoded = encode_document(parse_ocr(payload, tokenizer()))
        self.assertEqual(encoded.length, 4)
        self.assertTrue(np.all(encoded.bboxes[1:] == [100, 100, 300, 140]))
        self.assertEqual(set(encoded.grid_labels[1:].tolist()), {assign_grid(BBox.of((100, 100, 300, 140)), GridConfig())})

    def test_empty_batch(self) -> None:
        with self.assertRaises(CorpusError):
            build_batch([])

    def test_all_cells_reachable(self) -> None:
        grid = GridConfig()
        seen = {assign_grid(BBox.of((x, y, x, y)), grid) for x, y in itertools.product(range(0, 1001, 50), repeat=2)}
        self.assertEqual(seen, set(range(grid.size)))


if __name__ == '__main__':
    unittest.main()
