"""Binary checkpoint container.

Layout, all integers little-endian:

    b"WKRD"  u32 format version
    u32 header length, UTF-8 JSON header (model config and run metadata)
    u32 count, parameter records
    u32 count, first-moment records
    u32 count, second-moment records
    u64 step

A record is `u32 name length, UTF-8 name, u32 rank, rank x u32 dims, f64 payload`.
Records are written in name order so equal checkpoints have equal bytes.
"""

import json
import struct
import typing as t
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from docline.errors import CheckpointError
from docline.toolbox.fileio import atomic_write_bytes

MAGIC = b"WKRD"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass
class Checkpoint:
    header: dict[str, t.Any]
    params: dict[str, np.ndarray]
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def _pack_records(arrays: t.Mapping[str, np.ndarray]) -> bytes:
    chunks = [_U32.pack(len(arrays))]
    for name in sorted(arrays):
        array = np.require(arrays[name], dtype="<f8", requirements="C")
        encoded = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(array.ndim))
        chunks.extend(_U32.pack(dim) for dim in array.shape)
        chunks.append(array.tobytes())
    return b"".join(chunks)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([
        MAGIC,
        _U32.pack(FORMAT_VERSION),
        _U32.pack(len(header)),
        header,
        _pack_records(ckpt.params),
        _pack_records(ckpt.first_moment),
        _pack_records(ckpt.second_moment),
        _U64.pack(ckpt.step),
    ])


class _Reader:
    def __init__(self, payload: bytes, source: str) -> None:
        self.payload = payload
        self.source = source
        self.offset = 0

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.payload):
            raise CheckpointError(f"{self.source}: truncated checkpoint at byte {self.offset}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def u32(self) -> int:
        return int(_U32.unpack(self.take(_U32.size))[0])

    def u64(self) -> int:
        return int(_U64.unpack(self.take(_U64.size))[0])

    def records(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for _ in range(self.u32()):
            raw = self.take(self.u32())
            try:
                name = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise CheckpointError(f"{self.source}: record name is not UTF-8 at byte {self.offset - len(raw)}") from e
            shape = tuple(self.u32() for _ in range(self.u32()))
            count = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)
            out[name] = data.reshape(shape)
        return out


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(payload, source)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{source}: not a docline checkpoint (bad magic)")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: unreadable checkpoint header: {e}") from e
    params = reader.records()
    first = reader.records()
    second = reader.records()
    step = reader.u64()
    if reader.offset != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - reader.offset} trailing bytes after step counter")
    return Checkpoint(header=header, params=params, first_moment=first, second_moment=second, step=step)


def save_checkpoint(path: t.Union[str, Path], ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path: t.Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint: {path}")
    return decode_checkpoint(path.read_bytes(), source=str(path))
