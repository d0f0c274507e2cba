"""Per-patch temporal token dropping.

Each patch of frame t is scored by cosine similarity against the same patch
of the raw frame t-1 and kept only when the score is strictly below the
threshold. The first frame is kept whole; a frame whose mask comes out empty
keeps its least-similar patch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .numerics import cosine_rows


@dataclass(frozen=True)
class FrameFeatures:
    frame_index: int
    features: np.ndarray  # (P, D)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValueError(f"frame features must be (P>=1, D>=1), got {feats.shape}")
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")
        object.__setattr__(self, "features", feats)

    @property
    def num_patches(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class KeepMask:
    frame_index: int
    bits: np.ndarray  # bool, (P,)


@dataclass(frozen=True)
class PrunedFrame:
    frame_index: int
    patch_indices: np.ndarray  # int, strictly increasing
    features: np.ndarray  # (n_kept, D)

    def __len__(self) -> int:
        return len(self.patch_indices)


@dataclass(frozen=True)
class DtdConfig:
    tau_feat: float = 0.5

    def __post_init__(self):
        if not self.tau_feat > 0:
            raise ValueError("tau_feat must be positive")


@dataclass
class DropStats:
    total_tokens: int = 0
    kept_tokens: int = 0
    force_kept: int = 0
    residual_discarded: int = 0

    @property
    def dropped_tokens(self) -> int:
        return self.total_tokens - self.kept_tokens

    @property
    def drop_percent(self) -> float:
        if self.total_tokens == 0:
            return 0.0
        return 100.0 * (1.0 - self.kept_tokens / self.total_tokens)


def score_frame(curr: FrameFeatures, prev: FrameFeatures) -> np.ndarray:
    if curr.features.shape != prev.features.shape:
        raise ValueError(
            f"frame shape mismatch: {curr.features.shape} vs {prev.features.shape}"
        )
    if curr.frame_index != prev.frame_index + 1:
        raise ValueError(
            f"frames not consecutive: {prev.frame_index} -> {curr.frame_index}"
        )
    return cosine_rows(curr.features, prev.features)


def mask_frame(scores: Sequence[float], cfg: DtdConfig, frame_index: int) -> KeepMask:
    s = np.asarray(scores, dtype=np.float64)
    bits = s < cfg.tau_feat
    if not bits.any():
        # argmin returns the first minimum, i.e. ties go to the smallest patch
        bits[int(np.argmin(s))] = True
    return KeepMask(frame_index=frame_index, bits=bits)


def _emit(frame: FrameFeatures, bits: np.ndarray) -> PrunedFrame:
    idx = np.flatnonzero(bits)
    return PrunedFrame(frame.frame_index, idx, frame.features[idx])


@dataclass
class StreamPruner:
    """Online pruner; holds the previous raw frame of one stream."""

    cfg: DtdConfig = field(default_factory=DtdConfig)
    stats: DropStats = field(default_factory=DropStats)
    _prev: FrameFeatures | None = None

    def push(self, frame: FrameFeatures) -> PrunedFrame:
        if self._prev is None:
            bits = np.ones(frame.num_patches, dtype=bool)
        else:
            scores = score_frame(frame, self._prev)
            mask = mask_frame(scores, self.cfg, frame.frame_index)
            bits = mask.bits
            if not (scores < self.cfg.tau_feat).any():
                self.stats.force_kept += 1
        self._prev = frame
        self.stats.total_tokens += frame.num_patches
        self.stats.kept_tokens += int(bits.sum())
        return _emit(frame, bits)


def prune_stream(
    stream: Iterable[FrameFeatures], cfg: DtdConfig | None = None
) -> tuple[list[PrunedFrame], DropStats]:
    pruner = StreamPruner(cfg or DtdConfig())
    out = [pruner.push(f) for f in stream]
    if not out:
        raise ValueError("empty stream")
    return out, pruner.stats
