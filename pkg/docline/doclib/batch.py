import typing as t
from dataclasses import dataclass

import numpy as np

from docline.doclib.bbox import GridConfig, assign_grid
from docline.doclib.ocr import Document
from docline.doclib.tokenizer import CLS_ID, PAD_ID
from docline.errors import CorpusError

NO_LINE = -1
MAX_LINES = 64
MAX_TOKENS = 512


@dataclass(frozen=True)
class EncodedDocument:
    """One document as model inputs. Position 0 is always `[CLS]`.

    `membership[i]` is the textline of token i, or NO_LINE for `[CLS]` and for
    tokens of lines past the line cap. `line_mask[l]` is true for lines that keep
    at least one token.
    """

    doc_id: str
    token_ids: np.ndarray
    positions: np.ndarray
    bboxes: np.ndarray
    segments: np.ndarray
    membership: np.ndarray
    word_index: np.ndarray
    grid_labels: np.ndarray
    line_bboxes: np.ndarray
    line_mask: np.ndarray

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def real_lines(self) -> int:
        return int(self.line_mask.sum())

    @property
    def word_tokens(self) -> np.ndarray:
        return np.flatnonzero(self.word_index >= 0)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


def encode_document(
    doc: Document,
    max_lines: int = MAX_LINES,
    max_tokens: int = MAX_TOKENS,
    grid: t.Optional[GridConfig] = None,
) -> EncodedDocument:
    grid = grid or GridConfig()
    token_ids, bboxes, membership, word_index, grid_labels = [CLS_ID], [[0, 0, 0, 0]], [NO_LINE], [-1], [-1]
    word_counter = 0
    for line in doc.textlines:
        for word in line.words:
            box = word.bbox.as_list()
            cell = assign_grid(word.bbox, grid)
            for token in word.token_ids:
                token_ids.append(token)
                bboxes.append(box)
                membership.append(line.line_index if line.line_index < max_lines else NO_LINE)
                word_index.append(word_counter)
                grid_labels.append(cell)
            word_counter += 1
    if len(token_ids) == 1:
        raise CorpusError(f"{doc.doc_id}: document has no word tokens")
    keep = min(len(token_ids), max_tokens)

    kept_membership = np.asarray(membership[:keep], dtype=np.int64)
    line_bboxes = np.zeros((max_lines, 4), dtype=np.int64)
    line_mask = np.zeros(max_lines, dtype=bool)
    for line in doc.textlines[:max_lines]:
        if np.any(kept_membership == line.line_index):
            line_bboxes[line.line_index] = line.line_bbox.as_list()
            line_mask[line.line_index] = True
    return EncodedDocument(
        doc_id=doc.doc_id,
        token_ids=_frozen(np.asarray(token_ids[:keep], dtype=np.int64)),
        positions=_frozen(np.arange(keep, dtype=np.int64)),
        bboxes=_frozen(np.asarray(bboxes[:keep], dtype=np.int64)),
        segments=_frozen(np.zeros(keep, dtype=np.int64)),
        membership=_frozen(kept_membership),
        word_index=_frozen(np.asarray(word_index[:keep], dtype=np.int64)),
        grid_labels=_frozen(np.asarray(grid_labels[:keep], dtype=np.int64)),
        line_bboxes=_frozen(line_bboxes),
        line_mask=_frozen(line_mask),
    )


@dataclass(frozen=True)
class Batch:
    docs: tuple[Document, ...]
    encoded: tuple[EncodedDocument, ...]
    token_ids: np.ndarray
    token_mask: np.ndarray
    positions: np.ndarray
    bboxes: np.ndarray
    segments: np.ndarray
    membership: np.ndarray
    line_mask: np.ndarray

    @property
    def size(self) -> int:
        return len(self.docs)


def build_batch(
    docs: t.Sequence[Document],
    max_lines: int = MAX_LINES,
    max_tokens: int = MAX_TOKENS,
    grid: t.Optional[GridConfig] = None,
) -> Batch:
    """Encode and pad documents to a common token length; the line axis is always `max_lines`."""
    if not docs:
        raise CorpusError("build_batch needs at least one document")
    encoded = [encode_document(doc, max_lines, max_tokens, grid) for doc in docs]
    width = max(e.length for e in encoded)
    count = len(encoded)
    token_ids = np.full((count, width), PAD_ID, dtype=np.int64)
    token_mask = np.zeros((count, width), dtype=bool)
    positions = np.zeros((count, width), dtype=np.int64)
    bboxes = np.zeros((count, width, 4), dtype=np.int64)
    segments = np.zeros((count, width), dtype=np.int64)
    membership = np.full((count, width), NO_LINE, dtype=np.int64)
    for row, e in enumerate(encoded):
        n = e.length
        token_ids[row, :n] = e.token_ids
        token_mask[row, :n] = True
        positions[row, :n] = e.positions
        bboxes[row, :n] = e.bboxes
        segments[row, :n] = e.segments
        membership[row, :n] = e.membership
    return Batch(
        docs=tuple(docs),
        encoded=tuple(encoded),
        token_ids=token_ids,
        token_mask=token_mask,
        positions=positions,
        bboxes=bboxes,
        segments=segments,
        membership=membership,
        line_mask=np.stack([e.line_mask for e in encoded]),
    )
