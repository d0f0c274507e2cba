"""Hot window / cold store / block index.

The hot tier keeps the ``n_local_blocks`` most recent blocks with all their
layers. Admitting one block past capacity evicts the oldest (FIFO): its keys
are compressed into one vector per indexed layer and its full rotated K/V
are serialized into the cold store. An index entry is published only after
the cold write has succeeded.

Cold record layout (little endian)::

    magic "CFKV" | version u16 | block_id u64 | L u32 | H u32 | B u32 | D_k u32
    for each layer: K (H*B*D_k reals) then V (H*B*D_k reals)
    positions (B x u64)
    checksum u64  (blake2b-64 over every preceding byte)

Version 1 stores reals as float32, version 2 as float64.
"""

from __future__ import annotations

import hashlib
import os
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .backbone import LayerKV
from .gcm import BlockKey, GruParams, compress_block, mean_pool_key

MAGIC = b"CFKV"
HEADER = struct.Struct("<4sHQIIII")
CHECKSUM = struct.Struct("<Q")
VERSION_F32 = 1
VERSION_F64 = 2
_VERSION_DTYPES = {VERSION_F32: np.dtype("<f4"), VERSION_F64: np.dtype("<f8")}
INDEX_BYTES_PER_REAL = 4


class BlockNotFoundError(KeyError):
    pass


class ColdStoreCorruptionError(ValueError):
    pass


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class ColdRecord:
    block_id: int
    K: tuple[np.ndarray, ...]  # per layer (H, B, D_k), rotated
    V: tuple[np.ndarray, ...]
    positions: np.ndarray

    @classmethod
    def from_layers(cls, kvs: Sequence[LayerKV]) -> "ColdRecord":
        return cls(
            kvs[0].block_id,
            tuple(kv.K for kv in kvs),
            tuple(kv.V for kv in kvs),
            np.asarray(kvs[0].positions, dtype=np.int64),
        )

    def to_layers(self) -> list[LayerKV]:
        B = len(self.positions)
        return [
            LayerKV(layer, self.block_id, K, V, self.positions, None, np.zeros(B, dtype=bool))
            for layer, (K, V) in enumerate(zip(self.K, self.V))
        ]


def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def serialize_record(rec: ColdRecord, version: int = VERSION_F32) -> bytes:
    if version not in _VERSION_DTYPES:
        raise ValueError(f"unsupported record version {version}")
    dtype = _VERSION_DTYPES[version]
    L = len(rec.K)
    H, B, Dk = rec.K[0].shape
    parts = [HEADER.pack(MAGIC, version, rec.block_id, L, H, B, Dk)]
    for K, V in zip(rec.K, rec.V):
        if K.shape != (H, B, Dk) or V.shape != (H, B, Dk):
            raise ValueError("inconsistent layer shapes in cold record")
        parts.append(np.ascontiguousarray(K, dtype=dtype).tobytes())
        parts.append(np.ascontiguousarray(V, dtype=dtype).tobytes())
    parts.append(np.asarray(rec.positions, dtype="<u8").tobytes())
    body = b"".join(parts)
    return body + CHECKSUM.pack(_checksum(body))


def parse_header(data: bytes) -> dict:
    if len(data) < HEADER.size + CHECKSUM.size:
        raise ColdStoreCorruptionError("record truncated")
    magic, version, block_id, L, H, B, Dk = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ColdStoreCorruptionError(f"bad magic {magic!r}")
    if version not in _VERSION_DTYPES:
        raise ColdStoreCorruptionError(f"unknown record version {version}")
    return dict(version=version, block_id=block_id, layers=L, heads=H, block_size=B, head_dim=Dk)


def deserialize_record(data: bytes) -> ColdRecord:
    hdr = parse_header(data)
    dtype = _VERSION_DTYPES[hdr["version"]]
    L, H, B, Dk = hdr["layers"], hdr["heads"], hdr["block_size"], hdr["head_dim"]
    n = H * B * Dk
    expected = HEADER.size + 2 * L * n * dtype.itemsize + 8 * B + CHECKSUM.size
    if len(data) != expected:
        raise ColdStoreCorruptionError(f"record length {len(data)} != expected {expected}")
    body, (stored,) = data[:-CHECKSUM.size], CHECKSUM.unpack_from(data, len(data) - CHECKSUM.size)
    if _checksum(body) != stored:
        raise ColdStoreCorruptionError(f"checksum mismatch for block {hdr['block_id']}")
    off = HEADER.size
    Ks, Vs = [], []
    for _ in range(L):
        for dst in (Ks, Vs):
            arr = np.frombuffer(data, dtype=dtype, count=n, offset=off)
            dst.append(arr.astype(np.float64).reshape(H, B, Dk))
            off += n * dtype.itemsize
    positions = np.frombuffer(data, dtype="<u8", count=B, offset=off).astype(np.int64)
    return ColdRecord(hdr["block_id"], tuple(Ks), tuple(Vs), positions)


# ---------------------------------------------------------------- stores


class MemoryColdStore:
    """Cold tier held as serialized bytes in process memory."""

    def __init__(self):
        self._data: dict[int, bytes] = {}

    def put(self, block_id: int, data: bytes) -> None:
        self._data[block_id] = bytes(data)

    def get(self, block_id: int) -> bytes:
        try:
            return self._data[block_id]
        except KeyError:
            raise BlockNotFoundError(block_id) from None

    def __contains__(self, block_id) -> bool:
        return block_id in self._data

    def ids(self) -> list[int]:
        return sorted(self._data)

    def size_of(self, block_id: int) -> int:
        return len(self.get(block_id))


class DirectoryColdStore:
    """One file per block under a directory: ``block_<id>.cfkv``.

    Writes go to a temporary name and are renamed into place, so a block is
    either fully present or absent.
    """

    suffix = ".cfkv"

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, block_id: int) -> Path:
        return self.root / f"block_{block_id:010d}{self.suffix}"

    def put(self, block_id: int, data: bytes) -> None:
        final = self.path_for(block_id)
        tmp = final.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, final)

    def get(self, block_id: int) -> bytes:
        try:
            return self.path_for(block_id).read_bytes()
        except FileNotFoundError:
            raise BlockNotFoundError(block_id) from None

    def __contains__(self, block_id) -> bool:
        return self.path_for(block_id).exists()

    def ids(self) -> list[int]:
        out = []
        for p in self.root.glob(f"block_*{self.suffix}"):
            try:
                out.append(int(p.stem.split("_", 1)[1]))
            except ValueError:
                continue
        return sorted(out)

    def size_of(self, block_id: int) -> int:
        return self.path_for(block_id).stat().st_size


# ---------------------------------------------------------------- index


@dataclass
class BlockIndex:
    layer: int
    block_ids: list[int] = field(default_factory=list)
    _keys: list[np.ndarray] = field(default_factory=list)

    def append(self, key: BlockKey) -> None:
        if self.block_ids and key.block_id <= self.block_ids[-1]:
            raise ValueError("block index must grow in block_id order")
        self.block_ids.append(key.block_id)
        self._keys.append(np.asarray(key.g, dtype=np.float64))

    @property
    def keys(self) -> np.ndarray:
        if not self._keys:
            return np.zeros((0, 0))
        return np.stack(self._keys)

    def __len__(self) -> int:
        return len(self.block_ids)


# ---------------------------------------------------------------- cache


@dataclass(frozen=True)
class CacheConfig:
    n_local_blocks: int = 4
    index_layers: tuple[int, ...] | None = None  # None -> (0, L-1)
    cold_store_path: str | None = None
    cold_version: int = VERSION_F32
    compressor: str = "gru"  # "gru" | "mean"

    def __post_init__(self):
        if self.n_local_blocks < 1:
            raise ValueError("n_local_blocks must be >= 1")
        if self.cold_version not in _VERSION_DTYPES:
            raise ValueError(f"cold_version must be one of {sorted(_VERSION_DTYPES)}")
        if self.compressor not in ("gru", "mean"):
            raise ValueError("compressor must be 'gru' or 'mean'")

    def resolved_index_layers(self, num_layers: int) -> tuple[int, ...]:
        layers = (0, num_layers - 1) if self.index_layers is None else self.index_layers
        layers = tuple(sorted(set(int(x) for x in layers)))
        if not layers or layers[0] < 0 or layers[-1] >= num_layers:
            raise ValueError(f"index layers {layers} outside [0, {num_layers})")
        return layers


@dataclass
class CacheCounters:
    admitted: int = 0
    evicted: int = 0
    rehydrated: int = 0
    write_errors: int = 0
    bytes_hot: int = 0
    bytes_cold: int = 0


@dataclass(frozen=True)
class MemoryReport:
    hot_blocks: int
    hot_tokens: int
    bytes_hot: int
    bytes_cold: int
    index_entries: int
    index_bytes: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class TieredCache:
    """Single-writer tiered KV cache."""

    def __init__(self, cfg: CacheConfig, num_layers: int, gru: GruParams | None = None, store=None):
        self.cfg = cfg
        self.num_layers = num_layers
        self.index_layers = cfg.resolved_index_layers(num_layers)
        if cfg.compressor == "gru" and gru is None:
            raise ValueError("a GRU compressor needs GruParams")
        self.gru = gru
        if store is None:
            store = DirectoryColdStore(cfg.cold_store_path) if cfg.cold_store_path else MemoryColdStore()
        self.cold = store
        self.hot: deque[tuple[int, list[LayerKV]]] = deque()
        self.index = {layer: BlockIndex(layer) for layer in self.index_layers}
        self.counters = CacheCounters()
        self.block_size: int | None = None
        self.key_dim: int | None = None
        self.last_admitted = 0
        self.observers: list[Callable[["TieredCache", str], None]] = []

    # -- admission / eviction

    def admit_block(self, block_id: int, layers: Sequence[LayerKV]) -> None:
        if block_id != self.last_admitted + 1:
            raise ValueError(f"expected block {self.last_admitted + 1}, got {block_id}")
        if len(layers) != self.num_layers:
            raise ValueError(f"expected {self.num_layers} layers, got {len(layers)}")
        if any(kv.block_id != block_id for kv in layers):
            raise ValueError("layer block ids disagree with admitted block id")
        B = layers[0].num_tokens
        if self.block_size is None:
            self.block_size = B
        elif B != self.block_size:
            raise ValueError(f"block size {B} != cache block size {self.block_size}")
        # make room first so a failed eviction leaves the hot tier within bounds
        if len(self.hot) >= self.cfg.n_local_blocks:
            self.evict_block()
        self.hot.append((block_id, list(layers)))
        self.last_admitted = block_id
        self.counters.admitted += 1
        self.counters.bytes_hot += sum(kv.nbytes for kv in layers)
        self._notify("admit")

    def _block_key(self, kv: LayerKV) -> BlockKey:
        if self.cfg.compressor == "mean":
            return mean_pool_key(kv)
        return compress_block(self.gru, kv)

    def evict_block(self) -> int:
        if not self.hot:
            raise ValueError("nothing to evict")
        block_id, layers = self.hot[0]
        keys = [self._block_key(layers[layer]) for layer in self.index_layers]
        data = serialize_record(ColdRecord.from_layers(layers), self.cfg.cold_version)
        try:
            self.cold.put(block_id, data)
        except Exception:
            self.counters.write_errors += 1
            raise
        for key in keys:
            self.index[key.layer].append(key)
        self.hot.popleft()
        self.key_dim = len(keys[0].g)
        self.counters.evicted += 1
        self.counters.bytes_hot -= sum(kv.nbytes for kv in layers)
        self.counters.bytes_cold += len(data)
        self._notify("evict")
        return block_id

    # -- reads

    @property
    def hot_ids(self) -> list[int]:
        return [bid for bid, _ in self.hot]

    @property
    def hot_layers(self) -> list[list[LayerKV]]:
        return [layers for _, layers in self.hot]

    @property
    def cold_ids(self) -> list[int]:
        return list(self.index[self.index_layers[0]].block_ids)

    def read_record(self, block_id: int) -> ColdRecord:
        return deserialize_record(self.cold.get(block_id))

    def rehydrate(self, block_ids: Iterable[int]) -> list[list[LayerKV]]:
        ids = sorted(set(int(b) for b in block_ids))
        visible = set(self.cold_ids)
        out = []
        for bid in ids:
            if bid not in visible:
                raise BlockNotFoundError(bid)
            out.append(self.read_record(bid).to_layers())
        self.counters.rehydrated += len(ids)
        return out

    def hot_tokens(self) -> int:
        return len(self.hot) * (self.block_size or 0)

    def memory_report(self) -> MemoryReport:
        m = self.counters.evicted
        dg = self.key_dim or 0
        return MemoryReport(
            hot_blocks=len(self.hot),
            hot_tokens=self.hot_tokens(),
            bytes_hot=self.counters.bytes_hot,
            bytes_cold=self.counters.bytes_cold,
            index_entries=m,
            index_bytes=m * len(self.index_layers) * dg * INDEX_BYTES_PER_REAL,
        )

    def _notify(self, event: str) -> None:
        for fn in self.observers:
            fn(self, event)


@dataclass
class MemoryMonitor:
    """Observer that records residency bound violations."""

    n_local_blocks: int
    block_size: int
    peak_hot_tokens: int = 0
    peak_answer_tokens: int = 0
    violations: list[str] = field(default_factory=list)

    def __call__(self, cache: TieredCache, event: str) -> None:
        tokens = cache.hot_tokens()
        self.peak_hot_tokens = max(self.peak_hot_tokens, tokens)
        limit = self.n_local_blocks * self.block_size
        if tokens > limit:
            self.violations.append(f"{event}: hot tokens {tokens} > {limit}")

    def check_answer(self, resident_tokens: int, top_k: int, n_q: int) -> None:
        self.peak_answer_tokens = max(self.peak_answer_tokens, resident_tokens)
        limit = (self.n_local_blocks + top_k) * self.block_size + n_q
        if resident_tokens > limit:
            self.violations.append(f"answer: resident tokens {resident_tokens} > {limit}")
