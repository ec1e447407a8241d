"""Little-endian binary codecs for checkpoints, feature files and memory dumps.

All three formats open with a 4-byte magic and a u32 version (currently 1).

Checkpoint (``UCRW``)::

    magic | version u32 | layer count u32 |
    per layer: fan_in u32 | fan_out u32 | weights f32[fan_in*fan_out] | bias f32[fan_out]

Feature file (``UCRF``)::

    magic | version u32 | count u32 | dim u32 | f32[count*dim] row-major

Memory dump (``UCRM``)::

    magic | version u32 | dim u32 | prototype count u32 |
    per prototype: domain_id u32 | cluster_id u32 | f32[dim] |
    entry count u32 | per entry: domain_id u32 | sample_index u32 | prototype_index u32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ucr.encoder import EncoderParams
from ucr.errors import FormatError
from ucr.memory import ImageMemory, PrototypeBank

VERSION = 1
CHECKPOINT_MAGIC = b"UCRW"
FEATURES_MAGIC = b"UCRF"
MEMORY_MAGIC = b"UCRM"

_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")


class _Reader:
    """Cursor over a byte buffer that fails with FormatError on short reads."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError("truncated file")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(_U32.size))[0]

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(count * _F32.itemsize), dtype=_F32).copy()

    def header(self, magic: bytes) -> None:
        if self.take(len(magic)) != magic:
            raise FormatError("bad magic")
        version = self.u32()
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise FormatError("trailing bytes after payload")


def _read_bytes(path: Path | str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e


def _write_bytes(path: Path | str, payload: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as e:
        raise FormatError(f"cannot write {path}: {e}") from e


def _f32_bytes(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype=_F32).tobytes()


def encode_checkpoint(params: EncoderParams) -> bytes:
    parts = [CHECKPOINT_MAGIC, _U32.pack(VERSION), _U32.pack(len(params.weights))]
    for w, b in zip(params.weights, params.biases):
        parts += [_U32.pack(w.shape[0]), _U32.pack(w.shape[1]), _f32_bytes(w), _f32_bytes(b)]
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> EncoderParams:
    reader = _Reader(data)
    reader.header(CHECKPOINT_MAGIC)
    weights, biases = [], []
    for _ in range(reader.u32()):
        fan_in, fan_out = reader.u32(), reader.u32()
        weights.append(reader.f32(fan_in * fan_out).reshape(fan_in, fan_out).astype(np.float64))
        biases.append(reader.f32(fan_out).astype(np.float64))
    reader.finish()
    if not weights:
        raise FormatError("checkpoint has no layers")
    for prev, nxt in zip(weights[:-1], weights[1:]):
        if prev.shape[1] != nxt.shape[0]:
            raise FormatError("layer dimensions do not chain")
    return EncoderParams(weights=weights, biases=biases)


def write_checkpoint(params: EncoderParams, path: Path | str) -> None:
    """Save encoder parameters (stored as float32)."""
    _write_bytes(path, encode_checkpoint(params))


def read_checkpoint(path: Path | str) -> EncoderParams:
    """Load encoder parameters (returned as float64)."""
    return decode_checkpoint(_read_bytes(path))


def encode_features(features: np.ndarray) -> bytes:
    features = np.atleast_2d(np.asarray(features))
    count, dim = features.shape
    return b"".join(
        [FEATURES_MAGIC, _U32.pack(VERSION), _U32.pack(count), _U32.pack(dim), _f32_bytes(features)]
    )


def decode_features(data: bytes) -> np.ndarray:
    reader = _Reader(data)
    reader.header(FEATURES_MAGIC)
    count, dim = reader.u32(), reader.u32()
    features = reader.f32(count * dim).reshape(count, dim)
    reader.finish()
    return features.astype(np.float32)


def write_features(features: np.ndarray, path: Path | str) -> None:
    _write_bytes(path, encode_features(features))


def read_features(path: Path | str) -> np.ndarray:
    """Load a (count, dim) float32 feature matrix."""
    return decode_features(_read_bytes(path))


@dataclass
class MemoryDump:
    """Decoded contents of a memory dump file."""

    prototypes: np.ndarray
    prototype_keys: list[tuple[int, int]]
    entries: list[tuple[int, int, int]]


def encode_memory(bank: PrototypeBank, memory: ImageMemory) -> bytes:
    parts = [
        MEMORY_MAGIC,
        _U32.pack(VERSION),
        _U32.pack(bank.d_emb),
        _U32.pack(bank.num_old),
    ]
    for (domain_id, cluster_id), vector in zip(bank.old_keys, bank.old):
        parts += [_U32.pack(domain_id), _U32.pack(cluster_id), _f32_bytes(vector)]
    parts.append(_U32.pack(len(memory)))
    for entry in memory.entries:
        parts += [
            _U32.pack(entry.sample.domain_id),
            _U32.pack(entry.sample_index),
            _U32.pack(entry.prototype_index),
        ]
    return b"".join(parts)


def decode_memory(data: bytes) -> MemoryDump:
    reader = _Reader(data)
    reader.header(MEMORY_MAGIC)
    dim, count = reader.u32(), reader.u32()
    keys, vectors = [], []
    for _ in range(count):
        keys.append((reader.u32(), reader.u32()))
        vectors.append(reader.f32(dim))
    entries = [(reader.u32(), reader.u32(), reader.u32()) for _ in range(reader.u32())]
    reader.finish()
    prototypes = np.stack(vectors) if vectors else np.zeros((0, dim), dtype=np.float32)
    return MemoryDump(prototypes, keys, entries)


def write_memory_dump(bank: PrototypeBank, memory: ImageMemory, path: Path | str) -> None:
    _write_bytes(path, encode_memory(bank, memory))


def read_memory_dump(path: Path | str) -> MemoryDump:
    return decode_memory(_read_bytes(path))
