"""Binary feature-stream files.

Layout (little endian)::

    magic "CFST" | version u16 | T u32 | P u32 | D u32 | seed u64
    T*P*D float32, frame-major then patch-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dtd import FrameFeatures

MAGIC = b"CFST"
VERSION = 1
HEADER = struct.Struct("<4sHIIIQ")


class StreamFormatError(ValueError):
    pass


@dataclass(frozen=True)
class StreamFile:
    features: np.ndarray  # (T, P, D) float32
    seed: int = 0

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.features.shape

    def frames(self, first_index: int = 1) -> list[FrameFeatures]:
        return [
            FrameFeatures(first_index + t, self.features[t].astype(np.float64))
            for t in range(self.features.shape[0])
        ]


def encode_stream(features, seed: int = 0) -> bytes:
    arr = np.asarray(features)
    if arr.ndim != 3:
        raise ValueError("stream features must be (T, P, D)")
    T, P, D = arr.shape
    return HEADER.pack(MAGIC, VERSION, T, P, D, int(seed)) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_stream(data: bytes) -> StreamFile:
    if len(data) < HEADER.size:
        raise StreamFormatError("stream file truncated")
    magic, version, T, P, D, seed = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise StreamFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise StreamFormatError(f"unsupported stream version {version}")
    n = T * P * D
    if len(data) != HEADER.size + 4 * n:
        raise StreamFormatError(f"expected {HEADER.size + 4 * n} bytes, got {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", count=n, offset=HEADER.size).reshape(T, P, D)
    return StreamFile(arr.astype(np.float32), seed)


def write_stream(path, features, seed: int = 0) -> int:
    data = encode_stream(features, seed)
    Path(path).write_bytes(data)
    return len(data)


def read_stream(path) -> StreamFile:
    return decode_stream(Path(path).read_bytes())
