"""Procedural document pages with exact OCR ground truth.

Every word of the lexicon owns a fixed glyph pattern seeded by its token id, so
the same word always renders the same pixels. A page is a column of textlines,
each a row of words; boxes are the glyph cells, which bound every ink pixel.
"""

import functools
import logging
import typing as t

import numpy as np
from pydantic import BaseModel, Field, model_validator

from docline.doclib.ocr import IMAGE_SIZE, Document, parse_ocr
from docline.doclib.tokenizer import Tokenizer
from docline.errors import CorpusError

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"
LEXICON_SEED = 20_240_229
GLYPH_SEED = 7_919
MARGIN_PX = 8
MAX_WORD_CHARS = 4
INK_DENSITY = 0.45


class GenParams(BaseModel):
    seed: int = Field(default=0, ge=0, lt=2**64)
    lines_range: tuple[int, int] = (4, 10)
    words_per_line_range: tuple[int, int] = (2, 5)
    glyph_size_px: int = Field(default=6, ge=3)
    ink_level: float = Field(default=0.1, ge=0.0, le=0.5)
    background_level: float = Field(default=1.0, ge=0.8, le=1.0)
    vocab_size: int = Field(default=256, ge=2, le=len(CONSONANTS) * len(VOWELS) * (1 + len(CONSONANTS) * len(VOWELS)))
    successors: int = Field(default=2, ge=0)
    left_aligned: bool = True
    label: t.Optional[str] = None
    tag_first_line: bool = False

    @model_validator(mode="after")
    def _ranges(self) -> "GenParams":
        for name in ("lines_range", "words_per_line_range"):
            low, high = getattr(self, name)
            if low < 1 or low > high:
                raise ValueError(f"{name} must satisfy 1 <= min <= max, got {[low, high]}")
        return self

    @property
    def stroke_threshold(self) -> float:
        return (quantize(self.ink_level) + quantize(self.background_level)) / 2.0

    @property
    def fill_level(self) -> float:
        """Gray value of blank page pixels as rendered."""
        return quantize(self.background_level)

    def check_layout(self) -> None:
        """Raise CorpusError when the largest page these params allow cannot fit 224x224."""
        g = self.glyph_size_px
        usable = IMAGE_SIZE - 2 * MARGIN_PX
        widest = self.words_per_line_range[1] * word_width(MAX_WORD_CHARS, g) + (self.words_per_line_range[1] - 1) * 2 * g
        tallest = self.lines_range[1] * 2 * g
        if widest > usable or tallest > usable:
            raise CorpusError(
                f"layout overflow: up to {widest}x{tallest} px of text for a {usable}x{usable} px text area"
            )


def quantize(level: float) -> float:
    return round(level * 255) / 255.0


def word_width(chars: int, glyph: int) -> int:
    return chars * (glyph + 1) - 1


@functools.lru_cache(maxsize=None)
def build_lexicon(vocab_size: int) -> tuple[str, ...]:
    """`vocab_size` distinct pseudo-words of one or two consonant-vowel syllables."""
    syllables = [c + v for c in CONSONANTS for v in VOWELS]
    candidates = syllables + [a + b for a in syllables for b in syllables]
    rng = np.random.default_rng(LEXICON_SEED)
    picked = rng.choice(len(candidates), size=vocab_size, replace=False)
    return tuple(candidates[i] for i in sorted(picked))


@functools.lru_cache(maxsize=None)
def successor_table(vocab_size: int, successors: int) -> np.ndarray:
    """`[vocab_size, successors]` lexicon indices allowed to follow each word."""
    rng = np.random.default_rng([LEXICON_SEED, vocab_size, successors])
    table = rng.integers(0, vocab_size, size=(vocab_size, successors))
    table.flags.writeable = False
    return table


def sample_line_words(rng: np.random.Generator, params: GenParams, count: int) -> list[int]:
    """Lexicon indices of one textline.

    The first word is uniform over the lexicon; every later one is drawn from the
    successors of the word before it. With `successors=0` all words are uniform.
    """
    if params.successors == 0:
        return [int(i) for i in rng.integers(0, params.vocab_size, size=count)]
    table = successor_table(params.vocab_size, params.successors)
    picked = [int(rng.integers(0, params.vocab_size))]
    for _ in range(count - 1):
        picked.append(int(table[picked[-1], rng.integers(0, params.successors)]))
    return picked


@functools.lru_cache(maxsize=8)
def lexicon_tokenizer(vocab_size: int) -> Tokenizer:
    return Tokenizer.from_words(build_lexicon(vocab_size))


@functools.lru_cache(maxsize=4096)
def glyph_pattern(token_id: int, chars: int, glyph: int) -> np.ndarray:
    """Boolean ink mask [glyph, word_width] for a word; every character cell has ink."""
    rng = np.random.default_rng([GLYPH_SEED, token_id, glyph])
    mask = np.zeros((glyph, word_width(chars, glyph)), dtype=bool)
    for c in range(chars):
        cell = rng.random((glyph, glyph)) < INK_DENSITY
        if not cell.any():
            cell[rng.integers(glyph), rng.integers(glyph)] = True
        mask[:, c * (glyph + 1):c * (glyph + 1) + glyph] = cell
    mask.flags.writeable = False
    return mask


def generate_record(params: GenParams, index: int) -> tuple[dict[str, t.Any], np.ndarray]:
    """OCR record in pixel coordinates plus the uint8 page for document `index`."""
    params.check_layout()
    tokenizer = lexicon_tokenizer(params.vocab_size)
    lexicon = build_lexicon(params.vocab_size)
    rng = np.random.default_rng([params.seed, index])
    g = params.glyph_size_px
    ink = np.uint8(round(params.ink_level * 255))
    page = np.full((IMAGE_SIZE, IMAGE_SIZE), round(params.background_level * 255), dtype=np.uint8)

    n_lines = int(rng.integers(params.lines_range[0], params.lines_range[1] + 1))
    usable = IMAGE_SIZE - 2 * MARGIN_PX
    pitch = min(usable // n_lines, 3 * g)
    top = MARGIN_PX + int(rng.integers(0, usable - pitch * n_lines + 1))
    lines = []
    for line_no in range(n_lines):
        y = top + line_no * pitch + int(rng.integers(0, pitch - 2 * g + 1))
        n_words = int(rng.integers(params.words_per_line_range[0], params.words_per_line_range[1] + 1))
        texts = [lexicon[i] for i in sample_line_words(rng, params, n_words)]
        gaps = [int(rng.integers(g, 2 * g + 1)) for _ in range(n_words - 1)]
        span = sum(word_width(len(text), g) for text in texts) + sum(gaps)
        slack = min(usable - span, g) if params.left_aligned else usable - span
        x = MARGIN_PX + int(rng.integers(0, slack + 1))
        words = []
        for position, text in enumerate(texts):
            width = word_width(len(text), g)
            (token_id,) = tokenizer.encode_word(text)
            page[y:y + g, x:x + width][glyph_pattern(token_id, len(text), g)] = ink
            word: dict[str, t.Any] = {"text": text, "bbox": [x, y, x + width, y + g]}
            if params.tag_first_line:
                word["tag"] = ("B-X" if position == 0 else "I-X") if line_no == 0 else "O"
            words.append(word)
            if position < len(gaps):
                x += width + gaps[position]
        x0, x1 = words[0]["bbox"][0], words[-1]["bbox"][2]
        lines.append({"bbox": [x0, y, x1, y + g], "words": words})

    record: dict[str, t.Any] = {
        "doc_id": f"doc-{params.seed}-{index:06d}",
        "width": IMAGE_SIZE,
        "height": IMAGE_SIZE,
        "lines": lines,
    }
    if params.label is not None:
        record["label"] = params.label
    return record, page


def generate_document(params: GenParams, index: int) -> Document:
    record, page = generate_record(params, index)
    logging.debug(f"Generated {record['doc_id']} with {len(record['lines'])} textlines")
    return parse_ocr(record, lexicon_tokenizer(params.vocab_size), image=page[None, :, :] / 255.0)
