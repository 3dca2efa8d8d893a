import io
import typing as t
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from docline.doclib.bbox import BBox, denormalize_bbox
from docline.doclib.ocr import IMAGE_SIZE, Document
from docline.errors import DataError
from docline.evalkit.alignment import DocumentAlignment
from docline.toolbox.fileio import atomic_write_bytes

CORRECT_COLOR = (0, 170, 0)
WRONG_COLOR = (220, 0, 0)


def outline_box(bbox: BBox, size: int = IMAGE_SIZE) -> t.Optional[tuple[int, int, int, int]]:
    """Inclusive pixel corners of a line box, clipped to the page; None for an empty box."""
    x0, y0, x1, y1 = denormalize_bbox(bbox, size, size)
    if x1 <= x0 or y1 <= y0:
        return None
    return x0, y0, min(x1 - 1, size - 1), min(y1 - 1, size - 1)


def render_overlay(doc: Document, entry: DocumentAlignment) -> Image.Image:
    if entry.doc_id != doc.doc_id:
        raise DataError(f"alignment entry for {entry.doc_id} does not belong to {doc.doc_id}")
    lines = {line.line_index: line for line in doc.textlines}
    gray = np.clip(np.round(doc.image[0] * 255.0), 0, 255).astype(np.uint8)
    canvas = Image.fromarray(gray).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    for line_index, correct in zip(entry.lines, entry.correct):
        if line_index not in lines:
            raise DataError(f"{doc.doc_id}: alignment entry names textline {line_index}, the page has {len(lines)}")
        corners = outline_box(lines[line_index].line_bbox)
        if corners is not None:
            draw.rectangle(corners, outline=CORRECT_COLOR if correct else WRONG_COLOR, width=1)
    return canvas


def render_alignment(doc: Document, entry: DocumentAlignment, out_path: t.Union[str, Path]) -> Path:
    """Write the page with correctly aligned textlines outlined green and the others red."""
    buffer = io.BytesIO()
    render_overlay(doc, entry).save(buffer, format="PNG")
    path = Path(out_path)
    try:
        atomic_write_bytes(path, buffer.getvalue())
    except OSError as e:
        raise DataError(f"cannot write overlay {path}: {e}") from e
    return path
