"""Two-layer consensus top-K block retrieval over the compressed index."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .cache import BlockIndex
from .numerics import as_vector, cosine_against

CONSENSUS = "consensus"
LN_FILL = "ln_fill"
L0_FILL = "l0_fill"
MODES = ("consensus", "last_only")


@dataclass(frozen=True)
class ScoreList:
    layer: int
    block_ids: tuple[int, ...]
    scores: np.ndarray

    def as_map(self) -> dict[int, float]:
        return dict(zip(self.block_ids, self.scores.tolist()))

    def __len__(self) -> int:
        return len(self.block_ids)


@dataclass(frozen=True)
class RetrievalSet:
    block_ids: tuple[int, ...]
    provenance: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.block_ids)

    def __contains__(self, block_id) -> bool:
        return block_id in self.block_ids

    def by_provenance(self, kind: str) -> list[int]:
        return [b for b, p in zip(self.block_ids, self.provenance) if p == kind]


EMPTY = RetrievalSet((), ())


def score_blocks(q, index: BlockIndex) -> ScoreList:
    q = as_vector(q)
    if len(index) == 0:
        return ScoreList(index.layer, (), np.zeros(0))
    G = index.keys
    if G.shape[1] != q.shape[0]:
        raise ValueError(f"query dim {q.shape[0]} != key dim {G.shape[1]}")
    return ScoreList(index.layer, tuple(index.block_ids), cosine_against(q, G))


def _rank(ids: Sequence[int], score: Mapping[int, float]) -> list[int]:
    # descending score, ties to the smaller (earlier) block id
    return sorted(ids, key=lambda b: (-score[b], b))


def topk(scores: ScoreList, k: int) -> list[int]:
    if k < 1:
        raise ValueError("K must be >= 1")
    return _rank(scores.block_ids, scores.as_map())[:k]


def consensus_merge(R0, RL, s0: ScoreList, sL: ScoreList, k: int) -> RetrievalSet:
    m0, mL = s0.as_map(), sL.as_map()
    set0, setL = set(R0), set(RL)
    both = {b: m0[b] + mL[b] for b in setL & set0}
    ids, prov = [], []
    for group, tag in (
        (_rank(both, both), CONSENSUS),
        (_rank(setL - set0, mL), LN_FILL),
        (_rank(set0 - setL, m0), L0_FILL),
    ):
        for b in group:
            if len(ids) == k:
                break
            ids.append(b)
            prov.append(tag)
    return RetrievalSet(tuple(ids), tuple(prov))


def retrieve(
    pooled_by_layer: Sequence[np.ndarray],
    indexes: Mapping[int, BlockIndex],
    k: int,
    first_layer: int = 0,
    last_layer: int | None = None,
    mode: str = "consensus",
    query_map=None,
) -> RetrievalSet:
    """Score, take top-K on the first and last layers, merge.

    ``query_map`` optionally maps a pooled query into the key space when the
    index key dimension differs from the query dimension.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if last_layer is None:
        last_layer = len(pooled_by_layer) - 1
    needed = (last_layer,) if mode == "last_only" else (first_layer, last_layer)
    for layer in needed:
        if layer not in indexes:
            raise ValueError(f"layer {layer} is not indexed")
    if len(indexes[last_layer]) == 0:
        return EMPTY

    def q(layer):
        v = np.asarray(pooled_by_layer[layer], dtype=np.float64)
        return v if query_map is None else query_map(layer, v)

    sL = score_blocks(q(last_layer), indexes[last_layer])
    RL = topk(sL, k)
    if mode == "last_only":
        return RetrievalSet(tuple(RL), (LN_FILL,) * len(RL))
    s0 = score_blocks(q(first_layer), indexes[first_layer])
    return consensus_merge(topk(s0, k), RL, s0, sL, k)
