"""OCR records and the document model built from them.

An OCR record is one JSON object per page:

    {
      "doc_id": "invoice-001",
      "width": 850, "height": 1100,
      "image": "images/invoice-001.png",        optional, relative to the record file
      "coordinate_space": "pixel",              or "layout" for boxes already in [0, 1000]
      "label": "receipt",                       optional document class
      "lines": [
        {"bbox": [x0, y0, x1, y1],
         "words": [{"text": "TOTAL", "bbox": [x0, y0, x1, y1], "tag": "B-SUM"}]}
      ]
    }

`tag` (per word) and `label` (per page) are only read by the fine-tuning heads.
Fields not listed here are ignored.
"""

import json
import logging
import typing as t
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from docline.doclib.bbox import BBox, normalize_bbox
from docline.doclib.tokenizer import Tokenizer
from docline.errors import BBoxError, OcrFormatError

IMAGE_SIZE = 224

Coords = t.Annotated[list[float], Field(min_length=4, max_length=4)]


class OcrWord(BaseModel):
    model_config = ConfigDict(extra="ignore")

    text: str
    bbox: Coords
    tag: t.Optional[str] = None


class OcrLine(BaseModel):
    model_config = ConfigDict(extra="ignore")

    bbox: t.Optional[Coords] = None
    words: list[OcrWord]


class OcrRecord(BaseModel):
    model_config = ConfigDict(extra="ignore")

    doc_id: str
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    image: t.Optional[str] = None
    coordinate_space: t.Literal["pixel", "layout"] = "pixel"
    label: t.Optional[str] = None
    lines: list[OcrLine]


@dataclass(frozen=True)
class Word:
    text: str
    bbox: BBox
    token_ids: tuple[int, ...]
    tag: t.Optional[str] = None


@dataclass(frozen=True)
class Textline:
    words: tuple[Word, ...]
    line_bbox: BBox
    line_index: int


@dataclass(frozen=True, eq=False)
class Document:
    doc_id: str
    image: np.ndarray
    textlines: tuple[Textline, ...]
    width: int
    height: int
    label: t.Optional[str] = None

    def __post_init__(self) -> None:
        image = np.array(self.image, dtype=np.float64)
        if image.shape != (1, IMAGE_SIZE, IMAGE_SIZE):
            raise OcrFormatError(f"{self.doc_id}: image must be [1, {IMAGE_SIZE}, {IMAGE_SIZE}], got {image.shape}")
        image.flags.writeable = False
        object.__setattr__(self, "image", image)

    @property
    def words(self) -> list[Word]:
        return [word for line in self.textlines for word in line.words]

    @property
    def token_count(self) -> int:
        return sum(len(word.token_ids) for word in self.words)

    def same_as(self, other: "Document") -> bool:
        return (
            self.doc_id == other.doc_id
            and self.textlines == other.textlines
            and (self.width, self.height, self.label) == (other.width, other.height, other.label)
            and np.array_equal(self.image, other.image)
        )


def blank_page() -> np.ndarray:
    return np.ones((1, IMAGE_SIZE, IMAGE_SIZE))


def load_image(path: t.Union[str, Path]) -> np.ndarray:
    """Read a PNG or portable graymap as a [1, 224, 224] array in [0, 1]."""
    try:
        with Image.open(path) as img:
            gray = img.convert("L")
            if gray.size != (IMAGE_SIZE, IMAGE_SIZE):
                gray = gray.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
            pixels = np.asarray(gray, dtype=np.float64) / 255.0
    except (OSError, ValueError) as e:
        raise OcrFormatError(f"cannot read page image {path}: {e}") from e
    return pixels[None, :, :]


def _layout_box(coords: t.Sequence[float], record: OcrRecord) -> BBox:
    if record.coordinate_space == "layout":
        try:
            return BBox.of(coords)
        except ValueError as e:
            raise BBoxError(f"{record.doc_id}: box out of range: {list(coords)}") from e
    return normalize_bbox(coords, record.width, record.height)


def parse_ocr(
    payload: t.Union[t.Mapping[str, t.Any], OcrRecord],
    tokenizer: Tokenizer,
    image: t.Optional[np.ndarray] = None,
    base_dir: t.Optional[t.Union[str, Path]] = None,
) -> Document:
    """Build a Document: normalized boxes, tokenized words, textlines top-to-bottom then left-to-right.

    The page image comes from `image` when given, else from the record's `image`
    path (relative to `base_dir`), else a blank white page.
    """
    try:
        record = payload if isinstance(payload, OcrRecord) else OcrRecord.model_validate(payload)
    except ValidationError as e:
        doc_id = payload.get("doc_id", "<unknown>") if isinstance(payload, t.Mapping) else "<unknown>"
        raise OcrFormatError(f"malformed OCR record {doc_id}: {e}") from e

    staged = []
    for order, line in enumerate(record.lines):
        words = []
        for word_order, ocr_word in enumerate(line.words):
            text = ocr_word.text.strip()
            if not text:
                logging.debug(f"{record.doc_id}: skipping blank word in line {order}")
                continue
            try:
                box = _layout_box(ocr_word.bbox, record)
            except BBoxError as e:
                raise BBoxError(f"{record.doc_id}, line {order}: {e}") from e
            ids = tuple(tokenizer.encode_word(text))
            words.append((box.x0, word_order, Word(text=text, bbox=box, token_ids=ids, tag=ocr_word.tag)))
        if not words:
            continue
        words.sort(key=lambda item: (item[0], item[1]))
        ordered = tuple(item[2] for item in words)

        union = ordered[0].bbox
        for word in ordered[1:]:
            union = union.union(word.bbox)
        if line.bbox is None:
            line_box = union
        else:
            line_box = _layout_box(line.bbox, record)
            if not all(line_box.contains(word.bbox) for word in ordered):
                logging.warning(f"{record.doc_id}: line {order} box does not contain its words; using the union")
                line_box = line_box.union(union)
        staged.append((line_box.y0, line_box.x0, order, ordered, line_box))

    if not staged:
        raise OcrFormatError(f"{record.doc_id}: empty page (no words)")
    staged.sort(key=lambda item: (item[0], item[1], item[2]))
    textlines = tuple(
        Textline(words=words, line_bbox=box, line_index=index)
        for index, (_, _, _, words, box) in enumerate(staged)
    )

    if image is None and record.image:
        image_path = Path(record.image)
        if base_dir is not None and not image_path.is_absolute():
            image_path = Path(base_dir) / image_path
        image = load_image(image_path)
    return Document(
        doc_id=record.doc_id,
        image=blank_page() if image is None else image,
        textlines=textlines,
        width=record.width,
        height=record.height,
        label=record.label,
    )


def load_ocr_file(path: t.Union[str, Path], tokenizer: Tokenizer) -> Document:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise OcrFormatError(f"OCR record not found: {path}") from e
    except json.JSONDecodeError as e:
        raise OcrFormatError(f"OCR record {path} is not valid JSON: {e}") from e
    if not isinstance(payload, dict):
        raise OcrFormatError(f"OCR record {path} must be a JSON object")
    return parse_ocr(payload, tokenizer, base_dir=path.parent)


def serialize_document(doc: Document, image_ref: t.Optional[str] = None) -> dict[str, t.Any]:
    """OCR record for `doc` in layout coordinates; parsing it back yields an equal Document."""
    record: dict[str, t.Any] = {
        "doc_id": doc.doc_id,
        "width": doc.width,
        "height": doc.height,
        "coordinate_space": "layout",
        "lines": [
            {
                "bbox": line.line_bbox.as_list(),
                "words": [
                    {"text": word.text, "bbox": word.bbox.as_list(), **({"tag": word.tag} if word.tag else {})}
                    for word in line.words
                ],
            }
            for line in doc.textlines
        ],
    }
    if image_ref is not None:
        record["image"] = image_ref
    if doc.label is not None:
        record["label"] = doc.label
    return record
