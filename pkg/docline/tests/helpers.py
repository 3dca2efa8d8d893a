import os
import typing as t
from pathlib import Path

import numpy as np

from docline.doclib.batch import EncodedDocument, encode_document
from docline.doclib.corpus import Corpus, load_corpus
from docline.doclib.ocr import Document
from docline.docgen.corpus import generate_corpus
from docline.docgen.generator import GenParams, generate_document
from docline.encoders.config import ModelConfig
from docline.objectives.gradsuite import MICRO_PAGES, gradcheck_model_config, micro_model_config
from docline.trainkit.config import TrainConfig

SLOW = os.environ.get("DOCLINE_SLOW") == "1"

MICRO_GEN = MICRO_PAGES.model_copy(update={"seed": 11})

micro_config = micro_model_config
gradcheck_config = gradcheck_model_config


def micro_documents(count: int = 2, params: GenParams = MICRO_GEN) -> list[Document]:
    return [generate_document(params, index) for index in range(count)]


def micro_encoded(doc: Document, cfg: ModelConfig) -> EncodedDocument:
    return encode_document(doc, cfg.max_lines, cfg.max_tokens, cfg.grid)


def unit_rows(rng: np.random.Generator, rows: int, width: int) -> np.ndarray:
    x = rng.normal(size=(rows, width))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def micro_corpus(root: t.Union[str, Path], count: int = 6, seed: int = 11) -> Corpus:
    generate_corpus(MICRO_PAGES.model_copy(update={"seed": seed}), count, root, threads=1)
    return load_corpus(root, threads=1)


def micro_train_config(corpus: t.Union[str, Path], out: t.Union[str, Path], **overrides: t.Any) -> TrainConfig:
    fields: dict[str, t.Any] = dict(
        corpus=str(corpus),
        out=str(out),
        seed=3,
        batch_size=2,
        steps=4,
        checkpoint_every=2,
        log_every=1,
        model=micro_config().model_dump(),
    )
    fields.update(overrides)
    return TrainConfig.build(fields)
