"""Corpus directories.

    <root>/vocab.json        tokenizer vocabulary
    <root>/manifest.json     doc ids and content hashes (optional for hand-made corpora)
    <root>/ocr/<doc_id>.json OCR records
    <root>/images/<doc_id>.png
"""

import json
import logging
import typing as t
from dataclasses import dataclass
from pathlib import Path

from pydantic import BaseModel, ValidationError

from docline.doclib.ocr import Document, load_ocr_file
from docline.doclib.tokenizer import Tokenizer
from docline.errors import CorpusError, TokenizerError
from docline.toolbox.hashing import canonical_json, sha256_hex
from docline.toolbox.threads import map_in_threads

VOCAB_FILE = "vocab.json"
MANIFEST_FILE = "manifest.json"
OCR_DIR = "ocr"
IMAGE_DIR = "images"


class ManifestEntry(BaseModel):
    doc_id: str
    sha256: str


class Manifest(BaseModel):
    count: int
    params: t.Optional[dict[str, t.Any]] = None
    documents: list[ManifestEntry]

    def digest(self) -> str:
        return sha256_hex(canonical_json([entry.model_dump() for entry in self.documents]))


@dataclass
class Corpus:
    root: Path
    tokenizer: Tokenizer
    documents: list[Document]
    manifest: t.Optional[Manifest] = None

    def __len__(self) -> int:
        return len(self.documents)


def read_manifest(root: t.Union[str, Path]) -> t.Optional[Manifest]:
    path = Path(root) / MANIFEST_FILE
    if not path.is_file():
        return None
    try:
        return Manifest.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise CorpusError(f"unreadable manifest {path}: {e}") from e


def load_corpus(root: t.Union[str, Path], threads: t.Optional[int] = None) -> Corpus:
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus directory not found: {root}")
    try:
        tokenizer = Tokenizer.load(root / VOCAB_FILE)
    except TokenizerError as e:
        raise CorpusError(f"{root}: {e}") from e
    manifest = read_manifest(root)
    if manifest is not None:
        paths = [root / OCR_DIR / f"{entry.doc_id}.json" for entry in manifest.documents]
    else:
        paths = sorted((root / OCR_DIR).glob("*.json"))
    if not paths:
        raise CorpusError(f"{root}: corpus has no OCR records")
    documents = map_in_threads(lambda path: load_ocr_file(path, tokenizer), paths, threads)
    logging.info(f"Loaded {len(documents)} documents from {root}")
    return Corpus(root=root, tokenizer=tokenizer, documents=documents, manifest=manifest)
