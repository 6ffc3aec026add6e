"""
Versioned binary container for named tensors.

Layout (little-endian)::

    b"FMTX" | uint32 version
    uint32 metadata count | (uint32 len, key utf-8, uint32 len, value utf-8) ...
    uint32 tensor count   | (uint32 len, name utf-8, uint32 rank, uint32 dims[rank], float32 data) ...

Names carry their owner as a prefix: ``flow/`` for flow stacks, ``det/`` for
detectors, ``optim/m/`` and ``optim/v/`` for optimizer moments.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

import numpy as np
from loguru import logger

from binflow.utils.io import atomic_write_bytes

MAGIC = b"FMTX"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Raised for files that are not a readable checkpoint container."""


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, str] = field(default_factory=dict)

    def select(self, prefix: str, strip: bool = True) -> Dict[str, np.ndarray]:
        return {
            (name[len(prefix):] if strip else name): value
            for name, value in self.tensors.items()
            if name.startswith(prefix)
        }


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(tensors: Mapping[str, np.ndarray], metadata: Optional[Mapping[str, str]] = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    metadata = metadata or {}
    parts.append(struct.pack("<I", len(metadata)))
    for key, value in metadata.items():
        parts.append(_pack_str(str(key)))
        parts.append(_pack_str(str(value)))
    parts.append(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        array = np.asarray(value, dtype="<f4")
        parts.append(_pack_str(name))
        parts.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        parts.append(np.ascontiguousarray(array).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.payload):
            raise CheckpointFormatError(f"Checkpoint truncated at byte {self.offset}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def uint(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.uint()).decode("utf-8")


def decode_checkpoint(payload: bytes) -> Checkpoint:
    reader = _Reader(payload)
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError("Not a checkpoint container (bad magic)")
    version = reader.uint()
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    checkpoint = Checkpoint()
    for _ in range(reader.uint()):
        key = reader.text()
        checkpoint.metadata[key] = reader.text()
    for _ in range(reader.uint()):
        name = reader.text()
        rank = reader.uint()
        dims = tuple(reader.uint() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(dims)
        checkpoint.tensors[name] = data.astype(np.float32)
    if reader.offset != len(payload):
        raise CheckpointFormatError(f"{len(payload) - reader.offset} trailing bytes after the last tensor")
    return checkpoint


def save_checkpoint(
    path: Union[str, Path],
    tensors: Mapping[str, np.ndarray],
    metadata: Optional[Mapping[str, str]] = None,
) -> Path:
    target = atomic_write_bytes(path, encode_checkpoint(tensors, metadata))
    logger.info(f"Saved checkpoint {target} ({len(tensors)} tensors)")
    return target


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
