import logging
import typing as t

import numpy as np
from pydantic import BaseModel

from docline.doclib.ocr import Document
from docline.encoders.config import ModelConfig
from docline.errors import DataError, UsageError
from docline.evalkit.features import forward_clean
from docline.evalkit.ner import FinetuneConfig, head_logits, train_linear_head
from docline.numkit.tensor import Tensor
from docline.toolbox.threads import map_in_threads

PREFIX = "cls"


def document_features(params: t.Mapping[str, Tensor], cfg: ModelConfig, doc: Document) -> np.ndarray:
    """`[3d]`: mean visual token before fusion, mean visual output after fusion, fused `[CLS]`."""
    _, forward = forward_clean(params, cfg, doc)
    pre = forward.visual_tokens.numpy().mean(axis=0)
    post = forward.fused_visual.numpy().mean(axis=0)
    cls_feature = forward.fused_text.numpy()[0]
    return np.concatenate([pre, post, cls_feature])


def zero_head(cfg: ModelConfig, n_classes: int) -> dict[str, Tensor]:
    if n_classes < 2:
        raise UsageError(f"document classification needs at least 2 classes, got {n_classes}")
    return {
        f"{PREFIX}.w": Tensor(np.zeros((3 * cfg.hidden_dim, n_classes))),
        f"{PREFIX}.b": Tensor(np.zeros(n_classes)),
    }


def classify_document(
    params: t.Mapping[str, Tensor],
    cfg: ModelConfig,
    doc: Document,
    head: t.Mapping[str, Tensor],
) -> np.ndarray:
    """Class logits of one document under a linear head over `document_features`."""
    n_classes = head[f"{PREFIX}.b"].shape[0]
    if n_classes < 2:
        raise UsageError(f"document classification needs at least 2 classes, got {n_classes}")
    return head_logits(document_features(params, cfg, doc)[None, :], head, PREFIX)[0]


class ClassifierResult(BaseModel):
    classes: list[str]
    head: dict[str, t.Any]
    losses: list[float]
    train_accuracy: float
    eval_accuracy: t.Optional[float] = None


def _label_indices(docs: t.Sequence[Document], classes: t.Sequence[str]) -> np.ndarray:
    labels = []
    for doc in docs:
        if doc.label is None or doc.label not in classes:
            raise DataError(f"{doc.doc_id}: label {doc.label!r} is not one of {list(classes)}")
        labels.append(classes.index(doc.label))
    return np.asarray(labels, dtype=np.int64)


def _accuracy(features: np.ndarray, labels: np.ndarray, head: t.Mapping[str, Tensor]) -> float:
    predicted = np.argmax(head_logits(features, head, PREFIX), axis=1)
    return float(np.mean(predicted == labels))


def finetune_document_classifier(
    params: t.Mapping[str, Tensor],
    cfg: ModelConfig,
    train_docs: t.Sequence[Document],
    finetune: t.Optional[FinetuneConfig] = None,
    eval_docs: t.Optional[t.Sequence[Document]] = None,
    threads: t.Optional[int] = None,
) -> ClassifierResult:
    """Train the classification head on frozen encoder features of labeled documents."""
    finetune = finetune or FinetuneConfig()
    classes = sorted({doc.label for doc in train_docs if doc.label is not None})
    if len(classes) < 2:
        raise UsageError(f"document classification needs at least 2 labeled classes, found {classes}")
    labels = _label_indices(train_docs, classes)
    features = np.stack(map_in_threads(lambda doc: document_features(params, cfg, doc), list(train_docs), threads))
    rows = range(len(labels))
    head, losses = train_linear_head(
        [features[i:i + 1] for i in rows], [labels[i:i + 1] for i in rows], len(classes), finetune, PREFIX
    )
    result = ClassifierResult(
        classes=classes,
        head={name: p.numpy() for name, p in head.items()},
        losses=losses,
        train_accuracy=_accuracy(features, labels, head),
    )
    if eval_docs:
        eval_features = np.stack(map_in_threads(lambda doc: document_features(params, cfg, doc), list(eval_docs), threads))
        result.eval_accuracy = _accuracy(eval_features, _label_indices(eval_docs, classes), head)
    logging.info(f"Document classifier over {classes}: train accuracy {result.train_accuracy:.4f}, eval {result.eval_accuracy}")
    return result
