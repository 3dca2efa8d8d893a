import json
import logging
import typing as t
from pathlib import Path

import numpy as np
from PIL import Image

from docline.doclib.corpus import IMAGE_DIR, MANIFEST_FILE, OCR_DIR, VOCAB_FILE, Manifest, ManifestEntry
from docline.docgen.generator import GenParams, generate_record, lexicon_tokenizer
from docline.errors import CorpusError
from docline.toolbox.fileio import atomic_write_bytes
from docline.toolbox.hashing import canonical_json, sha256_hex
from docline.toolbox.threads import map_in_threads


def content_hash(record: t.Mapping[str, t.Any], page: np.ndarray) -> str:
    """sha256 over the raw uint8 page and the canonical JSON of the OCR record."""
    return sha256_hex(np.ascontiguousarray(page, dtype=np.uint8).tobytes(), canonical_json(record))


def generate_corpus(
    params: GenParams,
    count: int,
    out_dir: t.Union[str, Path],
    threads: t.Optional[int] = None,
) -> Manifest:
    """Write `count` generated documents, the vocabulary and a manifest under `out_dir`."""
    if count < 1:
        raise CorpusError(f"corpus size must be at least 1, got {count}")
    params.check_layout()
    out = Path(out_dir)
    try:
        (out / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
        (out / OCR_DIR).mkdir(parents=True, exist_ok=True)
        lexicon_tokenizer(params.vocab_size).save(out / VOCAB_FILE)
    except OSError as e:
        raise CorpusError(f"unwritable destination {out}: {e}") from e

    def write_one(index: int) -> ManifestEntry:
        record, page = generate_record(params, index)
        doc_id = record["doc_id"]
        record = {**record, "image": f"../{IMAGE_DIR}/{doc_id}.png"}
        try:
            Image.fromarray(page).save(out / IMAGE_DIR / f"{doc_id}.png")
            (out / OCR_DIR / f"{doc_id}.json").write_text(json.dumps(record, indent=1), encoding="utf-8")
        except OSError as e:
            raise CorpusError(f"unwritable destination {out}: {e}") from e
        return ManifestEntry(doc_id=doc_id, sha256=content_hash(record, page))

    entries = map_in_threads(write_one, list(range(count)), threads)
    manifest = Manifest(count=count, params=params.model_dump(mode="json"), documents=entries)
    atomic_write_bytes(out / MANIFEST_FILE, json.dumps(manifest.model_dump(mode="json"), indent=1).encode("utf-8"))
    logging.info(f"Generated {count} documents in {out} (manifest digest {manifest.digest()[:12]})")
    return manifest
