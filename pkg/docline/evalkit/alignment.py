"""Textline-region alignment with the dual-stream encoders only.

Each real textline's text feature retrieves the region whose RoI feature has the
largest dot product with it; the prediction is correct when it retrieves its own
region. Ties go to the lowest region index. The reverse direction (each region
retrieves a textline) is reported alongside.
"""

import json
import logging
import typing as t
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field

from docline.doclib.ocr import Document
from docline.encoders.config import ModelConfig
from docline.errors import DataError
from docline.evalkit.features import forward_clean
from docline.numkit.tensor import Tensor
from docline.toolbox.fileio import atomic_write_bytes
from docline.toolbox.threads import map_in_threads

REPORT_FILE = "alignment.jsonl"


class DocumentAlignment(BaseModel):
    doc_id: str
    lines: list[int]
    predicted: list[int]
    correct: list[bool]
    region_predicted: list[int]
    region_correct: list[bool]
    trivial: bool = False

    @property
    def real_lines(self) -> int:
        return len(self.lines)

    @property
    def accuracy(self) -> float:
        return sum(self.correct) / len(self.correct)

    @property
    def region_accuracy(self) -> float:
        return sum(self.region_correct) / len(self.region_correct)


class AlignmentReport(BaseModel):
    documents: list[DocumentAlignment] = Field(default_factory=list)

    @property
    def real_lines(self) -> int:
        return sum(doc.real_lines for doc in self.documents)

    @property
    def accuracy(self) -> float:
        """Correct textlines over all real textlines of the corpus."""
        return sum(sum(doc.correct) for doc in self.documents) / self.real_lines

    @property
    def region_accuracy(self) -> float:
        return sum(sum(doc.region_correct) for doc in self.documents) / self.real_lines

    @property
    def trivial(self) -> int:
        return sum(doc.trivial for doc in self.documents)

    def entry(self, doc_id: str) -> DocumentAlignment:
        for doc in self.documents:
            if doc.doc_id == doc_id:
                return doc
        raise DataError(f"alignment report has no entry for {doc_id}")

    def summary(self) -> dict[str, t.Any]:
        return {
            "documents": len(self.documents),
            "real_lines": self.real_lines,
            "accuracy": self.accuracy,
            "region_accuracy": self.region_accuracy,
            "trivial": self.trivial,
        }

    def save(self, path: t.Union[str, Path]) -> None:
        lines = [
            json.dumps({**doc.model_dump(), "accuracy": doc.accuracy, "region_accuracy": doc.region_accuracy})
            for doc in self.documents
        ]
        atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path: t.Union[str, Path]) -> "AlignmentReport":
        path = Path(path)
        try:
            rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"unreadable alignment report {path}: {e}") from e
        return cls(documents=[DocumentAlignment.model_validate(row) for row in rows])


def predict_alignment(rho: np.ndarray, tau: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Real-line indices and, over them, text->region and region->text argmax predictions.

    Predictions index into the real lines, so padded rows never win.
    """
    lines = np.flatnonzero(np.asarray(mask, dtype=bool))
    if lines.size == 0:
        raise DataError("alignment needs at least one real textline")
    scores = np.asarray(tau)[lines] @ np.asarray(rho)[lines].T
    return lines, np.argmax(scores, axis=1), np.argmax(scores, axis=0)


def align_features(doc_id: str, rho: np.ndarray, tau: np.ndarray, mask: np.ndarray) -> DocumentAlignment:
    lines, text_to_region, region_to_text = predict_alignment(rho, tau, mask)
    expected = np.arange(lines.size)
    return DocumentAlignment(
        doc_id=doc_id,
        lines=lines.tolist(),
        predicted=text_to_region.tolist(),
        correct=(text_to_region == expected).tolist(),
        region_predicted=region_to_text.tolist(),
        region_correct=(region_to_text == expected).tolist(),
        trivial=lines.size == 1,
    )


def align_document(params: t.Mapping[str, Tensor], cfg: ModelConfig, doc: Document) -> DocumentAlignment:
    _, forward = forward_clean(params, cfg, doc, fuse=False)
    result = align_features(doc.doc_id, forward.rho.numpy(), forward.tau.numpy(), forward.line_mask)
    if result.trivial:
        logging.debug(f"{doc.doc_id}: single textline, alignment is trivially correct")
    return result


def alignment_accuracy(
    params: t.Mapping[str, Tensor],
    cfg: ModelConfig,
    documents: t.Sequence[Document],
    threads: t.Optional[int] = None,
) -> AlignmentReport:
    """Align every document; parameters are only read, documents run on worker threads."""
    if not documents:
        raise DataError("alignment needs at least one document")
    report = AlignmentReport(documents=map_in_threads(lambda doc: align_document(params, cfg, doc), list(documents), threads))
    logging.info(
        f"Alignment over {len(report.documents)} documents: text->region {report.accuracy:.4f}, "
        f"region->text {report.region_accuracy:.4f} ({report.trivial} trivial)"
    )
    return report
