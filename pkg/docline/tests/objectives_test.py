import math
import os
import tempfile
import unittest

import numpy as np
from pydantic import ValidationError

from docline.doclib.batch import encode_document
from docline.doclib.bbox import BBox, denormalize_bbox
from docline.doclib.ocr import IMAGE_SIZE, Document, parse_ocr
from docline.doclib.tokenizer import MASK_ID, Tokenizer
from docline.docgen.generator import GenParams, generate_document
from docline.encoders.model import BatchFeatures
from docline.errors import DataError, NumericError
from docline.numkit.gradcheck import grad_check
from docline.numkit.tensor import Tensor
from docline.objectives.gradsuite import (
    GRADCHECK_THRESHOLD,
    gradcheck_model_config,
    micro_batch,
    micro_params,
    objective_grad_check,
)
from docline.objectives.losses import (
    Lambdas,
    TgmBatch,
    mlm_loss,
    mrm_loss,
    textline_similarity,
    tgm_loss,
    total_loss,
    trc_loss,
)
from docline.objectives.masking import (
    ACTION_KEEP,
    ACTION_MASK,
    ACTION_RANDOM,
    MaskPlan,
    MaskRates,
    apply_plan,
    plan_masks,
)
from docline.objectives.pipeline import ObjectiveToggles, forward_prepared, pretraining_loss
from docline.tests.helpers import micro_config


def dense_document(lines: int = 64, words: int = 8) -> Document:
    """A blank page whose words are one token each: `lines * words` word tokens."""
    record = {
        "doc_id": "dense",
        "width": 1000,
        "height": 1000,
        "coordinate_space": "layout",
        "lines": [
            {"words": [{"text": "ba", "bbox": [j * 120, i * 15, j * 120 + 90, i * 15 + 10]} for j in range(words)]}
            for i in range(lines)
        ],
    }
    return parse_ocr(record, Tokenizer.from_words(["ba"]))


def pixel_region(box: np.ndarray) -> tuple[slice, slice]:
    x0, y0, x1, y1 = denormalize_bbox(BBox.of(box), IMAGE_SIZE, IMAGE_SIZE)
    return slice(y0, y1), slice(x0, x1)


def features(rho: np.ndarray, tau: np.ndarray, mask: np.ndarray) -> BatchFeatures:
    return BatchFeatures(rho=Tensor(rho), tau=Tensor(tau), pad_mask=np.asarray(mask, dtype=bool))


def brute_similarity(a: np.ndarray, b: np.ndarray, mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    total, count = 0.0, 0
    for i in range(len(a)):
        if not mask_a[i]:
            continue
        best = -math.inf
        for k in range(len(b)):
            if mask_b[k]:
                best = max(best, float(np.dot(a[i], b[k]) / (np.linalg.norm(a[i]) * np.linalg.norm(b[k]))))
        total += best
        count += 1
    return total / count


def brute_trc(rho: np.ndarray, tau: np.ndarray, mask: np.ndarray) -> float:
    n = len(rho)
    loss = 0.0
    for first, second in ((rho, tau), (tau, rho)):
        for m in range(n):
            scores = [brute_similarity(first[m], second[j], mask[m], mask[j]) for j in range(n)]
            loss += -(1.0 / n) * (scores[m] - math.log(sum(math.exp(s) for s in scores)))
    return 0.5 * loss


def random_masked_features(rng: np.random.Generator, n: int, lines: int, width: int):
    rho = rng.normal(size=(n, lines, width))
    tau = rng.normal(size=(n, lines, width))
    mask = rng.random((n, lines)) < 0.7
    mask[:, 0] = True
    rho[~mask] = 0.0
    tau[~mask] = 0.0
    return rho, tau, mask


class TestPlanMasks(unittest.TestCase):

    def setUp(self) -> None:
        self.dense = dense_document()
        self.dense_encoded = encode_document(self.dense)
        self.dense_vocab = Tokenizer.from_words(["ba"]).vocab_size

    def test_line_counts_and_disjointness_on_twenty_lines(self) -> None:
        doc = generate_document(GenParams(seed=2, glyph_size_px=4, lines_range=(20, 20)), 0)
        encoded = encode_document(doc)
        plan = plan_masks(doc, 5, encoded=encoded)
        self.assertEqual(len(plan.mrm_lines), 3)
        taken = set(encoded.membership[plan.mlm_positions].tolist()) | set(plan.mrm_lines.tolist())
        eligible = 20 - len(taken)
        self.assertEqual(len(plan.tgm_lines), math.ceil(0.15 * eligible))
        self.assertFalse(set(plan.tgm_lines.tolist()) & taken)

    def test_mlm_count_rate_and_action_split(self) -> None:
        self.assertEqual(self.dense_encoded.length, 512)
        words = self.dense_encoded.word_tokens.size
        self.assertEqual(words, 511)
        counts, actions = [], []
        for seed in range(1000):
            plan = plan_masks(self.dense, seed, encoded=self.dense_encoded, vocab_size=self.dense_vocab)
            counts.append(plan.mlm_positions.size)
            actions.append(plan.mlm_actions)
        self.assertAlmostEqual(float(np.mean(counts)), 0.15 * words, delta=3.0)
        self.assertAlmostEqual(float(np.sum(counts)) / (1000 * words), 0.15, delta=0.01)
        actions = np.concatenate(actions)
        self.assertAlmostEqual(float(np.mean(actions == ACTION_MASK)), 0.8, delta=0.01)
        self.assertAlmostEqual(float(np.mean(actions == ACTION_RANDOM)), 0.1, delta=0.01)
        self.assertAlmostEqual(float(np.mean(actions == ACTION_KEEP)), 0.1, delta=0.01)

    def test_background_pixel_rate(self) -> None:
        masked = region = 0
        rates = MaskRates(mlm=0.0)
        for seed in range(40):
            plan = plan_masks(self.dense, seed, rates, encoded=self.dense_encoded)
            self.assertEqual(plan.mrm_lines.size, 10)
            footprint = np.zeros((224, 224), dtype=bool)
            for line in plan.mrm_lines:
                footprint[pixel_region(self.dense_encoded.line_bboxes[line])] = True
            masked += int(plan.mrm_pixel_mask.sum())
            region += int(footprint.sum())
        self.assertGreaterEqual(region, 100_000)
        self.assertAlmostEqual(masked / region, 0.15, delta=0.01)

    def test_every_stroke_in_mrm_lines_is_masked(self) -> None:
        params = GenParams(seed=8)
        doc = generate_document(params, 1)
        encoded = encode_document(doc)
        plan = plan_masks(doc, 3, MaskRates(mlm=0.0, mrm=1.0), encoded=encoded,
                          stroke_threshold=params.stroke_threshold)
        footprint = np.zeros((224, 224), dtype=bool)
        for line in plan.mrm_lines:
            footprint[pixel_region(encoded.line_bboxes[line])] = True
        strokes = (doc.image[0] < params.stroke_threshold) & footprint
        self.assertTrue(strokes.any())
        np.testing.assert_array_equal(plan.mrm_pixel_mask[0] & strokes, strokes)
        self.assertFalse((plan.mrm_pixel_mask[0] & ~footprint).any())

    def test_disjointness_property(self) -> None:
        pages = GenParams(seed=4, lines_range=(2, 10))
        for index in range(100):
            doc = generate_document(pages, index)
            encoded = encode_document(doc)
            for seed in range(10):
                plan = plan_masks(doc, [index, seed], encoded=encoded)
                mrm, tgm = set(plan.mrm_lines.tolist()), set(plan.tgm_lines.tolist())
                self.assertFalse(mrm & tgm)
                self.assertFalse(tgm & set(encoded.membership[plan.mlm_positions].tolist()))
                self.assertTrue(all(encoded.line_mask[line] for line in mrm | tgm))

    def test_every_line_masked_leaves_no_tgm_lines(self) -> None:
        doc = generate_document(GenParams(seed=1), 0)
        encoded = encode_document(doc)
        plan = plan_masks(doc, 0, MaskRates(mlm=1.0), encoded=encoded)
        self.assertEqual(plan.tgm_lines.size, 0)
        self.assertEqual(apply_plan(encoded, doc.image, plan).tgm_positions.size, 0)

    def test_pure_function_of_seed(self) -> None:
        doc = generate_document(GenParams(seed=6), 2)
        self.assertTrue(plan_masks(doc, [1, 2]).same_as(plan_masks(doc, [1, 2])))
        self.assertFalse(plan_masks(doc, [1, 2]).same_as(plan_masks(doc, [1, 3])))

    def test_apply_plan(self) -> None:
        doc = generate_document(GenParams(seed=6), 3)
        encoded = encode_document(doc)
        original = doc.image.copy()
        plan = plan_masks(doc, 9, MaskRates(mlm=0.5), encoded=encoded, vocab_size=260)
        masked = apply_plan(encoded, doc.image, plan)
        ids = masked.inputs.token_ids
        for position, action, replacement in zip(plan.mlm_positions, plan.mlm_actions, plan.mlm_replacements):
            if action == ACTION_MASK:
                self.assertEqual(ids[position], MASK_ID)
            elif action == ACTION_RANDOM:
                self.assertEqual(ids[position], replacement)
            else:
                self.assertEqual(ids[position], encoded.token_ids[position])
        np.testing.assert_array_equal(masked.inputs.bboxes[plan.mlm_positions], 0)
        np.testing.assert_array_equal(masked.inputs.bboxes[masked.tgm_positions], 0)
        np.testing.assert_array_equal(masked.image[plan.mrm_pixel_mask], 1.0)
        for box in plan.mlm_covered_boxes:
            self.assertTrue(np.all(masked.image[0][pixel_region(box)] == 0.0))
        np.testing.assert_array_equal(doc.image, original)

    def test_plan_for_another_document(self) -> None:
        first, second = (generate_document(GenParams(seed=6), index) for index in (0, 1))
        with self.assertRaises(DataError):
            apply_plan(encode_document(second), second.image, plan_masks(first, 0))

    def test_plan_save_load(self) -> None:
        doc = generate_document(GenParams(seed=6), 4)
        plan = plan_masks(doc, 12)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "plan.npz")
            plan.save(path)
            self.assertTrue(MaskPlan.load(path).same_as(plan))
            with self.assertRaises(DataError):
                MaskPlan.load(os.path.join(tmp, "missing.npz"))


class TestMlmLoss(unittest.TestCase):

    def test_one_hot_logits(self) -> None:
        vocab = 6
        labels = np.array([0, 3, 5, 1])
        fused = Tensor(np.eye(vocab)[labels])
        params = {"mlm.w": Tensor(100.0 * np.eye(vocab)), "mlm.b": Tensor(np.zeros(vocab))}
        loss = mlm_loss([fused], [np.array([1, 2])], [labels], params)
        self.assertLess(loss.item(), 1e-3)

    def test_uniform_logits(self) -> None:
        params = {"mlm.w": Tensor(np.zeros((4, 256))), "mlm.b": Tensor(np.zeros(256))}
        fused = Tensor(np.random.default_rng(0).normal(size=(5, 4)))
        loss = mlm_loss([fused], [np.array([0, 4])], [np.array([7, 1, 2, 3, 200])], params)
        self.assertAlmostEqual(loss.item(), math.log(256), places=12)

    def test_unmasked_labels_do_not_matter(self) -> None:
        rng = np.random.default_rng(1)
        params = {"mlm.w": Tensor(rng.normal(size=(4, 10))), "mlm.b": Tensor(rng.normal(size=10))}
        fused = Tensor(rng.normal(size=(5, 4)))
        where = [np.array([1, 3])]
        a = mlm_loss([fused], where, [np.array([0, 1, 2, 3, 4])], params).item()
        b = mlm_loss([fused], where, [np.array([9, 1, 8, 3, 7])], params).item()
        self.assertEqual(a, b)

    def test_skip_and_errors(self) -> None:
        params = {"mlm.w": Tensor(np.zeros((4, 10))), "mlm.b": Tensor(np.zeros(10))}
        fused = Tensor(np.zeros((3, 4)))
        self.assertIsNone(mlm_loss([fused], [np.array([], dtype=np.int64)], [np.zeros(3)], params))
        with self.assertRaises(DataError):
            mlm_loss([fused], [np.array([0])], [np.array([10, 0, 0])], params)


class TestTextlineSimilarity(unittest.TestCase):

    def test_worked_examples(self) -> None:
        one = np.ones(1, dtype=bool)
        a, b = np.array([[0.6, 0.8]]), np.array([[1.0, 0.0]])
        self.assertAlmostEqual(textline_similarity(a, b, one, one).item(), 0.6, delta=1e-12)
        rows = np.eye(3)
        two = np.ones(3, dtype=bool)
        self.assertAlmostEqual(textline_similarity(rows, rows, two, two).item(), 1.0, delta=1e-12)
        rho = np.array([[1.0, 0.0], [0.0, 1.0]])
        tau = np.array([[0.8, 0.6], [0.6, 0.8]])
        mask = np.ones(2, dtype=bool)
        self.assertAlmostEqual(textline_similarity(rho, tau, mask, mask).item(), 0.8, delta=1e-12)

    def test_matches_brute_force(self) -> None:
        rng = np.random.default_rng(2)
        for _ in range(100):
            rho, tau, mask = random_masked_features(rng, 2, 5, 3)
            value = textline_similarity(rho[0], tau[1], mask[0], mask[1]).item()
            self.assertAlmostEqual(value, brute_similarity(rho[0], tau[1], mask[0], mask[1]), delta=1e-12)
            self.assertGreaterEqual(value, -1.0 - 1e-12)
            self.assertLessEqual(value, 1.0 + 1e-12)

    def test_padding_and_scale_invariance(self) -> None:
        rng = np.random.default_rng(3)
        rho, tau = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        mask = np.ones(4, dtype=bool)
        base = textline_similarity(rho, tau, mask, mask).item()
        padded_rho = np.vstack([rho, np.zeros((10, 3))])
        padded_tau = np.vstack([tau, np.zeros((10, 3))])
        padded_mask = np.r_[mask, np.zeros(10, dtype=bool)]
        self.assertAlmostEqual(textline_similarity(padded_rho, padded_tau, padded_mask, padded_mask).item(), base, delta=1e-12)
        self.assertAlmostEqual(textline_similarity(3.5 * rho, tau, mask, mask).item(), base, delta=1e-12)

    def test_empty_mask(self) -> None:
        with self.assertRaises(DataError):
            textline_similarity(np.ones((2, 2)), np.ones((2, 2)), np.zeros(2, dtype=bool), np.ones(2, dtype=bool))


class TestTrcLoss(unittest.TestCase):

    def test_single_document_is_zero(self) -> None:
        rng = np.random.default_rng(0)
        loss = trc_loss(features(rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 3, 4)), np.ones((1, 3))))
        self.assertEqual(loss.item(), 0.0)

    def test_orthogonal_pair(self) -> None:
        rho = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
        loss = trc_loss(features(rho, rho.copy(), np.ones((2, 1)))).item()
        self.assertAlmostEqual(loss, math.log(1 + math.exp(-1)), delta=1e-12)
        self.assertAlmostEqual(loss, 0.31326, delta=1e-5)

    def test_matches_brute_force(self) -> None:
        rng = np.random.default_rng(4)
        for n in range(1, 5):
            for lines in range(1, 5):
                rho, tau, mask = random_masked_features(rng, n, lines, 1 + (n * lines) % 8)
                loss = trc_loss(features(rho, tau, mask)).item()
                self.assertAlmostEqual(loss, brute_trc(rho, tau, mask), delta=1e-10)

    def test_padded_lines_do_not_change_loss(self) -> None:
        rng = np.random.default_rng(5)
        rho, tau, mask = random_masked_features(rng, 3, 4, 5)
        base = trc_loss(features(rho, tau, mask)).item()
        pad = np.zeros((3, 10, 5))
        padded = trc_loss(features(np.concatenate([rho, pad], 1), np.concatenate([tau, pad], 1),
                                   np.concatenate([mask, np.zeros((3, 10), dtype=bool)], 1))).item()
        self.assertAlmostEqual(padded, base, delta=1e-12)

    def test_modality_scale_invariance(self) -> None:
        rng = np.random.default_rng(6)
        rho, tau, mask = random_masked_features(rng, 3, 4, 5)
        base = trc_loss(features(rho, tau, mask)).item()
        self.assertAlmostEqual(trc_loss(features(7.0 * rho, tau, mask)).item(), base, delta=1e-12)

    def test_temperature_sharpens(self) -> None:
        rho = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
        plain = trc_loss(features(rho, rho.copy(), np.ones((2, 1)))).item()
        sharp = trc_loss(features(rho, rho.copy(), np.ones((2, 1))), temperature=0.1).item()
        self.assertLess(sharp, plain)

    def test_gradients(self) -> None:
        rng = np.random.default_rng(7)
        rho, tau, mask = random_masked_features(rng, 3, 4, 5)

        def fn(p: dict[str, Tensor]) -> Tensor:
            return trc_loss(BatchFeatures(rho=p["rho"] * mask[:, :, None], tau=p["tau"] * mask[:, :, None], pad_mask=mask))

        report = grad_check(fn, {"rho": rho, "tau": tau})
        self.assertLess(report.max_rel_err, 1e-4, report.worst())


class TestMrmLoss(unittest.TestCase):

    def setUp(self) -> None:
        rng = np.random.default_rng(0)
        self.original = rng.random((1, 224, 224))
        self.mask = rng.random((1, 224, 224)) < 0.1

    def test_examples(self) -> None:
        self.assertEqual(mrm_loss(Tensor(self.original), self.original, self.mask).item(), 0.0)
        shifted = self.original + 0.25 * self.mask
        self.assertAlmostEqual(mrm_loss(Tensor(shifted), self.original, self.mask).item(), 0.25, delta=1e-12)
        noisy = shifted + 3.0 * (~self.mask)
        self.assertEqual(mrm_loss(Tensor(noisy), self.original, self.mask).item(),
                         mrm_loss(Tensor(shifted), self.original, self.mask).item())

    def test_empty_mask_skips(self) -> None:
        self.assertIsNone(mrm_loss(Tensor(self.original), self.original, np.zeros((1, 224, 224), dtype=bool)))


class TestTgmLoss(unittest.TestCase):

    def test_one_hot_logits(self) -> None:
        labels = np.array([2, 0, 3])
        loss = tgm_loss(TgmBatch(logits=[Tensor(100.0 * np.eye(4)[labels])], labels=[labels]))
        self.assertLess(loss.item(), 1e-3)

    def test_worked_example(self) -> None:
        logits = Tensor(np.array([[2.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]))
        loss = tgm_loss(TgmBatch(logits=[logits], labels=[np.array([0, 3])]))
        self.assertAlmostEqual(loss.item(), 1.72705, delta=1e-5)
        self.assertAlmostEqual(loss.item(), math.log(3 + math.exp(2)) - 2 + math.log(4), delta=1e-12)

    def test_batch_average(self) -> None:
        logits = Tensor(np.array([[0.3, -1.0, 2.0, 0.5]]))
        labels = np.array([1])
        one = tgm_loss(TgmBatch(logits=[logits], labels=[labels])).item()
        two = tgm_loss(TgmBatch(logits=[logits, logits], labels=[labels, labels])).item()
        self.assertAlmostEqual(two, one, delta=1e-15)
        with_empty = tgm_loss(TgmBatch(logits=[logits, None], labels=[labels, np.zeros(0, dtype=np.int64)])).item()
        self.assertAlmostEqual(with_empty, one / 2, delta=1e-15)

    def test_uniform_over_default_grid(self) -> None:
        loss = tgm_loss(TgmBatch(logits=[Tensor(np.zeros((1, 49)))], labels=[np.array([17])]))
        self.assertAlmostEqual(loss.item(), math.log(49), delta=1e-12)
        self.assertAlmostEqual(loss.item(), 3.89182, delta=1e-5)

    def test_label_outside_grid(self) -> None:
        with self.assertRaises(DataError):
            tgm_loss(TgmBatch(logits=[Tensor(np.zeros((1, 4)))], labels=[np.array([4])]))
        self.assertIsNone(tgm_loss(TgmBatch(logits=[None], labels=[np.zeros(0, dtype=np.int64)])))


class TestTotalLoss(unittest.TestCase):

    def test_weighted_sum(self) -> None:
        total, report = total_loss(Tensor(2.0), Tensor(0.5), Tensor(0.3), Tensor(0.4))
        self.assertAlmostEqual(report.total, 2.8, delta=1e-12)
        self.assertEqual(total.item(), report.total)
        lam = report.lambdas
        self.assertEqual(report.total, report.mlm + lam.trc * report.trc + lam.mrm * report.mrm + lam.tgm * report.tgm)

    def test_all_zero(self) -> None:
        _, report = total_loss(0.0, 0.0, 0.0, 0.0)
        self.assertEqual(report.total, 0.0)

    def test_trc_ablation(self) -> None:
        lambdas = Lambdas(trc=0.0)
        _, a = total_loss(1.0, 0.5, 0.2, 0.1, lambdas=lambdas)
        _, b = total_loss(1.0, 9.0, 0.2, 0.1, lambdas=lambdas)
        self.assertEqual(a.total, b.total)

    def test_absent_components(self) -> None:
        total, report = total_loss(mlm=None, trc=Tensor(1.0), skipped=["mlm"])
        self.assertEqual(report.mlm, 0.0)
        self.assertEqual(report.skipped, ["mlm"])
        self.assertAlmostEqual(total.item(), 0.2, delta=1e-15)
        total, _ = total_loss()
        self.assertIsNone(total)

    def test_non_finite(self) -> None:
        with self.assertRaises(NumericError) as ctx:
            total_loss(Tensor(1.0), Tensor(float("nan")), step=7)
        self.assertEqual(ctx.exception.report.step, 7)


class TestPipeline(unittest.TestCase):

    def test_toggles(self) -> None:
        with self.assertRaises(ValidationError):
            ObjectiveToggles(mlm=False, trc=False, mrm=False, tgm=False)
        self.assertEqual(ObjectiveToggles.preset("mlm+mrm").enabled, ["mlm", "mrm"])
        self.assertEqual(ObjectiveToggles.preset("mlm+mrm+trc+tgm").enabled, ["mlm", "trc", "mrm", "tgm"])
        with self.assertRaises(ValueError):
            ObjectiveToggles.preset("mlm+tia")

    def test_disabled_objectives_report_zero(self) -> None:
        cfg = micro_config()
        batch = micro_batch(0, cfg)
        params = micro_params(cfg, 0)
        loss, report = pretraining_loss(params, cfg, batch, ObjectiveToggles.preset("mlm"))
        self.assertEqual((report.trc, report.mrm, report.tgm), (0.0, 0.0, 0.0))
        self.assertEqual(loss.item(), report.total)
        self.assertEqual(report.total, report.mlm)

    def test_full_loss_is_deterministic(self) -> None:
        cfg = micro_config()
        a = pretraining_loss(micro_params(cfg, 1), cfg, micro_batch(1, cfg))[1]
        b = pretraining_loss(micro_params(cfg, 1), cfg, micro_batch(1, cfg))[1]
        self.assertEqual(a, b)
        self.assertEqual(a.skipped, [])


class TestObjectiveGradients(unittest.TestCase):

    def check(self, objective: str) -> None:
        report = objective_grad_check(objective, seed=1)
        self.assertLess(report.max_rel_err, GRADCHECK_THRESHOLD, report.worst())

    def test_mlm(self) -> None:
        self.check("mlm")

    def test_trc(self) -> None:
        self.check("trc")

    def test_mrm(self) -> None:
        self.check("mrm")

    def test_tgm(self) -> None:
        self.check("tgm")

    def test_total(self) -> None:
        self.check("total")

    def test_relative_error_has_no_raised_floor(self) -> None:
        report = objective_grad_check("trc", seed=1)
        self.assertEqual(report.floor, 1e-12)
        self.assertTrue(report.passed(GRADCHECK_THRESHOLD))

    def test_textline_vectors_are_unit_scale(self) -> None:
        cfg = gradcheck_model_config()
        params = micro_params(cfg, 1)
        for item in micro_batch(1, cfg):
            out = forward_prepared(params, cfg, item, fuse=False)
            norms = np.linalg.norm(out.rho.data[out.line_mask], axis=1)
            self.assertGreater(norms.min(), 1e-2)


if __name__ == '__main__':
    unittest.main()
