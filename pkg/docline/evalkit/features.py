import typing as t

from docline.doclib.batch import EncodedDocument, encode_document
from docline.doclib.ocr import Document
from docline.encoders.config import ModelConfig
from docline.encoders.model import DocumentForward, forward_document
from docline.encoders.text import TextInputs
from docline.numkit.tensor import Tensor


def forward_clean(
    params: t.Mapping[str, Tensor], cfg: ModelConfig, doc: Document, fuse: bool = True
) -> tuple[EncodedDocument, DocumentForward]:
    """Forward an uncorrupted document, as evaluation and fine-tuning see it."""
    encoded = encode_document(doc, cfg.max_lines, cfg.max_tokens, cfg.grid)
    forward = forward_document(
        params, cfg, doc.image, TextInputs.of(encoded), encoded.line_bboxes, encoded.line_mask, fuse=fuse
    )
    return encoded, forward
