"""Mask planning for one document and the corrupted model inputs it implies.

The planner draws, in this order:

* MLM: each word token independently with rate `mlm`; a picked token is replaced by
  `[MASK]` (80%), a random word id (10%) or kept (10%). Its box is zeroed and its
  image region covered.
* MRM: ceil(rate * lines) textlines. Inside each picked line, every stroke pixel and a
  `background` fraction of the other pixels are masked. Pixels of MLM-picked words
  never count towards the MRM loss.
* TGM: ceil(rate * eligible) textlines among those that are neither MRM-picked nor
  hold an MLM-picked token. Their token boxes are zeroed.
"""

import math
import typing as t
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field

from docline.doclib.batch import EncodedDocument, encode_document
from docline.doclib.bbox import BBox, denormalize_bbox
from docline.doclib.ocr import IMAGE_SIZE, Document
from docline.doclib.tokenizer import MASK_ID, SPECIAL_TOKENS
from docline.encoders.text import TextInputs
from docline.errors import CorpusError, DataError

ACTION_MASK = 0
ACTION_RANDOM = 1
ACTION_KEEP = 2

STROKE_THRESHOLD = 0.55
FILL_LEVEL = 1.0


class MaskRates(BaseModel):
    mlm: float = Field(default=0.15, ge=0.0, le=1.0)
    mrm: float = Field(default=0.15, ge=0.0, le=1.0)
    tgm: float = Field(default=0.15, ge=0.0, le=1.0)
    background: float = Field(default=0.15, ge=0.0, le=1.0)
    mask_share: float = Field(default=0.8, ge=0.0, le=1.0)
    random_share: float = Field(default=0.1, ge=0.0, le=1.0)


@dataclass(frozen=True)
class MaskPlan:
    doc_id: str
    seed: np.ndarray
    mlm_positions: np.ndarray
    mlm_actions: np.ndarray
    mlm_replacements: np.ndarray
    mlm_covered_boxes: np.ndarray
    mrm_lines: np.ndarray
    mrm_pixel_mask: np.ndarray
    tgm_lines: np.ndarray

    _FIELDS = (
        "seed",
        "mlm_positions",
        "mlm_actions",
        "mlm_replacements",
        "mlm_covered_boxes",
        "mrm_lines",
        "mrm_pixel_mask",
        "tgm_lines",
    )

    def save(self, path: t.Union[str, Path]) -> None:
        with open(path, "wb") as f:
            np.savez_compressed(f, doc_id=np.array(self.doc_id), **{name: getattr(self, name) for name in self._FIELDS})

    @classmethod
    def load(cls, path: t.Union[str, Path]) -> "MaskPlan":
        try:
            with np.load(path, allow_pickle=False) as data:
                return cls(doc_id=str(data["doc_id"]), **{name: np.array(data[name]) for name in cls._FIELDS})
        except (OSError, KeyError, ValueError) as e:
            raise DataError(f"unreadable mask plan {path}: {e}") from e

    def same_as(self, other: "MaskPlan") -> bool:
        return self.doc_id == other.doc_id and all(
            np.array_equal(getattr(self, name), getattr(other, name)) for name in self._FIELDS
        )


def _pick_lines(rng: np.random.Generator, candidates: np.ndarray, rate: float) -> np.ndarray:
    if candidates.size == 0:
        return np.zeros(0, dtype=np.int64)
    count = min(math.ceil(rate * candidates.size), candidates.size)
    return np.sort(rng.choice(candidates, size=count, replace=False)).astype(np.int64)


def _pixel_box(box: t.Sequence[int]) -> tuple[slice, slice]:
    x0, y0, x1, y1 = denormalize_bbox(BBox.of(box), IMAGE_SIZE, IMAGE_SIZE)
    return slice(y0, y1), slice(x0, x1)


def plan_masks(
    doc: Document,
    seed: t.Union[int, t.Sequence[int]],
    rates: t.Optional[MaskRates] = None,
    encoded: t.Optional[EncodedDocument] = None,
    vocab_size: t.Optional[int] = None,
    stroke_threshold: float = STROKE_THRESHOLD,
) -> MaskPlan:
    """Plan the masks of one document; a pure function of (doc, seed)."""
    rates = rates or MaskRates()
    encoded = encoded or encode_document(doc)
    words = encoded.word_tokens
    if words.size == 0:
        raise CorpusError(f"{doc.doc_id}: no word tokens to mask")
    seed_array = np.atleast_1d(np.asarray(seed, dtype=np.uint64))
    rng = np.random.default_rng(seed_array)
    first_word = len(SPECIAL_TOKENS)
    vocab_size = vocab_size or int(encoded.token_ids.max()) + 1

    picked = words[rng.random(words.size) < rates.mlm]
    draws = rng.random(picked.size)
    actions = np.where(
        draws < rates.mask_share,
        ACTION_MASK,
        np.where(draws < rates.mask_share + rates.random_share, ACTION_RANDOM, ACTION_KEEP),
    ).astype(np.int64)
    replacements = np.full(picked.size, -1, dtype=np.int64)
    random_slots = actions == ACTION_RANDOM
    if random_slots.any() and vocab_size > first_word:
        replacements[random_slots] = rng.integers(first_word, vocab_size, size=int(random_slots.sum()))
    else:
        actions[random_slots] = ACTION_KEEP
    covered = encoded.bboxes[picked].astype(np.int64).reshape(-1, 4)

    real_lines = np.flatnonzero(encoded.line_mask)
    mrm_lines = _pick_lines(rng, real_lines, rates.mrm)
    pixel_mask = np.zeros((1, IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    image = doc.image[0]
    for line in mrm_lines:
        rows, cols = _pixel_box(encoded.line_bboxes[line])
        region = image[rows, cols]
        chosen = (region < stroke_threshold) | (rng.random(region.shape) < rates.background)
        pixel_mask[0, rows, cols] |= chosen
    for box in covered:
        rows, cols = _pixel_box(box)
        pixel_mask[0, rows, cols] = False

    taken = set(encoded.membership[picked].tolist()) | set(mrm_lines.tolist())
    eligible = np.array([line for line in real_lines if line not in taken], dtype=np.int64)
    tgm_lines = _pick_lines(rng, eligible, rates.tgm)

    return MaskPlan(
        doc_id=doc.doc_id,
        seed=seed_array,
        mlm_positions=picked.astype(np.int64),
        mlm_actions=actions,
        mlm_replacements=replacements,
        mlm_covered_boxes=covered,
        mrm_lines=mrm_lines,
        mrm_pixel_mask=pixel_mask,
        tgm_lines=tgm_lines,
    )


@dataclass(frozen=True)
class MaskedInputs:
    inputs: TextInputs
    image: np.ndarray
    tgm_positions: np.ndarray


def tgm_positions(encoded: EncodedDocument, plan: MaskPlan) -> np.ndarray:
    return np.flatnonzero(np.isin(encoded.membership, plan.tgm_lines) & (encoded.word_index >= 0))


def apply_plan(
    encoded: EncodedDocument,
    image: np.ndarray,
    plan: MaskPlan,
    fill_level: float = FILL_LEVEL,
) -> MaskedInputs:
    """Corrupt tokens, boxes and pixels as the plan says; the originals are untouched."""
    if plan.doc_id != encoded.doc_id:
        raise DataError(f"mask plan for {plan.doc_id} applied to {encoded.doc_id}")
    token_ids = encoded.token_ids.copy()
    positions = plan.mlm_positions
    token_ids[positions[plan.mlm_actions == ACTION_MASK]] = MASK_ID
    random_slots = plan.mlm_actions == ACTION_RANDOM
    token_ids[positions[random_slots]] = plan.mlm_replacements[random_slots]

    bboxes = encoded.bboxes.copy()
    tgm = tgm_positions(encoded, plan)
    bboxes[positions] = 0
    bboxes[tgm] = 0

    corrupted = np.array(image, dtype=np.float64)
    corrupted[plan.mrm_pixel_mask] = fill_level
    for box in plan.mlm_covered_boxes:
        rows, cols = _pixel_box(box)
        corrupted[0, rows, cols] = 0.0

    inputs = TextInputs.of(encoded).replace(token_ids=token_ids, bboxes=bboxes)
    return MaskedInputs(inputs=inputs, image=corrupted, tgm_positions=tgm)
