"""Cut the surviving token stream into uniform blocks of ``block_size`` tokens.

A trailing partial block is zero-padded only when it would be the stream's
only block; otherwise it is discarded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dtd import PrunedFrame

PAD_INDEX = -1


@dataclass(frozen=True)
class TokenRecord:
    frame_index: int
    patch_index: int
    feature: np.ndarray


@dataclass(frozen=True)
class Block:
    block_id: int
    frame_indices: np.ndarray  # int64, (B,), PAD_INDEX on pad slots
    patch_indices: np.ndarray
    features: np.ndarray  # (B, D)
    pad_count: int = 0

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def pad_mask(self) -> np.ndarray:
        return self.frame_indices == PAD_INDEX

    def tokens(self) -> list[TokenRecord]:
        return [
            TokenRecord(int(t), int(p), self.features[i])
            for i, (t, p) in enumerate(zip(self.frame_indices, self.patch_indices))
        ]


@dataclass(frozen=True)
class PackerConfig:
    block_size: int = 196

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")


def _make_block(block_id, frames, patches, feats, block_size, dim) -> Block:
    n = len(frames)
    pad = block_size - n
    f = np.full(block_size, PAD_INDEX, dtype=np.int64)
    p = np.full(block_size, PAD_INDEX, dtype=np.int64)
    x = np.zeros((block_size, dim))
    f[:n] = frames
    p[:n] = patches
    if n:
        x[:n] = np.asarray(feats, dtype=np.float64).reshape(n, dim)
    return Block(block_id, f, p, x, pad)


def pack(tokens: Sequence[TokenRecord], cfg: PackerConfig | None = None) -> list[Block]:
    cfg = cfg or PackerConfig()
    B = cfg.block_size
    n = len(tokens)
    if n == 0:
        return []
    dim = len(tokens[0].feature)
    full, rem = divmod(n, B)
    stop = full * B if full else n
    blocks = []
    for j, start in enumerate(range(0, stop, B), start=1):
        chunk = tokens[start : start + B]
        blocks.append(
            _make_block(
                j,
                [t.frame_index for t in chunk],
                [t.patch_index for t in chunk],
                [t.feature for t in chunk],
                B,
                dim,
            )
        )
    return blocks


def residual_discarded(n_tokens: int, block_size: int) -> int:
    full, rem = divmod(n_tokens, block_size)
    return rem if full else 0


def tokens_of(frames: Iterable[PrunedFrame]) -> list[TokenRecord]:
    return [
        TokenRecord(fr.frame_index, int(p), fr.features[i])
        for fr in frames
        for i, p in enumerate(fr.patch_indices)
    ]


@dataclass
class PackerState:
    """Online packer buffer. Emits a block whenever B tokens are buffered."""

    cfg: PackerConfig = field(default_factory=PackerConfig)
    emitted: int = 0
    residual_discarded: int = 0
    last_frame: int | None = None
    finalized: bool = False
    _frames: list = field(default_factory=list)
    _patches: list = field(default_factory=list)
    _feats: list = field(default_factory=list)
    _dim: int | None = None

    @property
    def buffered(self) -> int:
        return len(self._frames)

    def push(self, frame: PrunedFrame) -> list[Block]:
        if self.finalized:
            raise ValueError("packer already finalized")
        if self.last_frame is not None and frame.frame_index <= self.last_frame:
            raise ValueError(
                f"out-of-order frame {frame.frame_index} after {self.last_frame}"
            )
        self.last_frame = frame.frame_index
        if len(frame) and self._dim is None:
            self._dim = frame.features.shape[1]
        out = []
        B = self.cfg.block_size
        for i, p in enumerate(frame.patch_indices):
            self._frames.append(frame.frame_index)
            self._patches.append(int(p))
            self._feats.append(frame.features[i])
            if len(self._frames) == B:
                out.append(self._flush())
        return out

    def _flush(self) -> Block:
        self.emitted += 1
        blk = _make_block(
            self.emitted,
            self._frames,
            self._patches,
            self._feats,
            self.cfg.block_size,
            self._dim,
        )
        self._frames, self._patches, self._feats = [], [], []
        return blk

    def finalize(self) -> list[Block]:
        """Apply the tail rule: pad if nothing was emitted yet, otherwise discard."""
        if self.finalized:
            return []
        self.finalized = True
        if not self._frames:
            return []
        if self.emitted == 0:
            return [self._flush()]
        self.residual_discarded += len(self._frames)
        self._frames, self._patches, self._feats = [], [], []
        return []


def pack_streaming(frame: PrunedFrame, state: PackerState) -> tuple[list[Block], PackerState]:
    return state.push(frame), state
