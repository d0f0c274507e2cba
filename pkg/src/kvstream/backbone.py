"""Seeded linear stand-in for the language model.

Produces per-layer, per-head keys/values for packed blocks and per-layer
queries for a question. There are no transformer layers here: each layer is
three independent random projections, which is enough to drive the cache,
retrieval and attention machinery with well-shaped tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ROPE_BASE, rope_rotate
from .packer import Block
from .rng import keyed_uniform

POOLING_STRATEGIES = ("mean", "last")


@dataclass(frozen=True)
class BackboneConfig:
    input_dim: int
    layers: int = 4
    heads: int = 4
    head_dim: int = 16
    seed: int = 0
    # W_Q = c * W_K + sqrt(1 - c^2) * R; c = 1 ties queries to keys so that
    # "same content" means "high query/key similarity" in the toy model.
    qk_coupling: float = 1.0
    rope_base: float = ROPE_BASE
    query_pooling: str = "mean"

    def __post_init__(self):
        for name in ("input_dim", "layers", "heads", "head_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for rotary pairing")
        if not 0.0 <= self.qk_coupling <= 1.0:
            raise ValueError("qk_coupling must lie in [0, 1]")
        if self.query_pooling not in POOLING_STRATEGIES:
            raise ValueError(f"query_pooling must be one of {POOLING_STRATEGIES}")

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim


@dataclass(frozen=True)
class LayerWeights:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray


@dataclass(frozen=True)
class BackboneWeights:
    cfg: BackboneConfig
    layers: tuple[LayerWeights, ...]


@dataclass(frozen=True)
class LayerKV:
    """Keys/values of one block at one layer.

    ``K`` carries the rotary phase of ``positions``; ``K_content`` is the same
    keys before rotation and is what the block index is built from.
    """

    layer: int
    block_id: int
    K: np.ndarray  # (H, B, D_k)
    V: np.ndarray  # (H, B, D_k)
    positions: np.ndarray  # int64, (B,)
    K_content: np.ndarray | None = None
    pad_mask: np.ndarray | None = None

    @property
    def num_tokens(self) -> int:
        return self.K.shape[1]

    @property
    def nbytes(self) -> int:
        return self.K.nbytes + self.V.nbytes


@dataclass(frozen=True)
class QueryVectors:
    pooled: tuple[np.ndarray, ...]  # per layer, (H*D_k,)
    Q: tuple[np.ndarray, ...]  # per layer, (n_q, H*D_k), rotated
    Q_content: tuple[np.ndarray, ...]  # per layer, unrotated
    positions: np.ndarray

    @property
    def n_q(self) -> int:
        return self.Q[0].shape[0]


def init_backbone(cfg: BackboneConfig) -> BackboneWeights:
    bound = 1.0 / np.sqrt(cfg.input_dim)
    shape = (cfg.input_dim, cfg.model_dim)
    c = cfg.qk_coupling
    layers = []
    for layer in range(cfg.layers):
        W_K = keyed_uniform(cfg.seed, ("backbone", layer, "k"), shape, bound)
        W_V = keyed_uniform(cfg.seed, ("backbone", layer, "v"), shape, bound)
        if c == 1.0:
            W_Q = W_K.copy()
        else:
            R = keyed_uniform(cfg.seed, ("backbone", layer, "q"), shape, bound)
            W_Q = c * W_K + np.sqrt(1.0 - c * c) * R
        for w in (W_Q, W_K, W_V):
            w.setflags(write=False)
        layers.append(LayerWeights(W_Q, W_K, W_V))
    return BackboneWeights(cfg, tuple(layers))


def split_heads(X: np.ndarray, heads: int) -> np.ndarray:
    """(n, H*D_k) -> (H, n, D_k)."""
    n = X.shape[0]
    return X.reshape(n, heads, -1).transpose(1, 0, 2)


def merge_heads(X: np.ndarray) -> np.ndarray:
    """(H, n, D_k) -> (n, H*D_k)."""
    H, n, dk = X.shape
    return X.transpose(1, 0, 2).reshape(n, H * dk)


def block_start_position(block_id: int, block_size: int) -> int:
    return (block_id - 1) * block_size + 1


def project_block(weights: BackboneWeights, block: Block, start_position: int | None = None) -> list[LayerKV]:
    cfg = weights.cfg
    X = block.features
    if X.shape[1] != cfg.input_dim:
        raise ValueError(f"token dim {X.shape[1]} != backbone input dim {cfg.input_dim}")
    if start_position is None:
        start_position = block_start_position(block.block_id, block.size)
    positions = np.arange(start_position, start_position + block.size, dtype=np.int64)
    out = []
    for layer, lw in enumerate(weights.layers):
        K_content = split_heads(X @ lw.W_K, cfg.heads)
        V = split_heads(X @ lw.W_V, cfg.heads)
        K = rope_rotate(K_content, positions, cfg.rope_base)
        out.append(LayerKV(layer, block.block_id, K, V, positions, K_content, block.pad_mask))
    return out


def question_positions(n_mem: int, n_q: int) -> np.ndarray:
    if n_q < 1:
        raise ValueError("a question needs at least one token")
    if n_mem < 0:
        raise ValueError("n_mem must be non-negative")
    return np.arange(n_mem + 1, n_mem + n_q + 1, dtype=np.int64)


def rotate_queries(Q_content: np.ndarray, positions, cfg: BackboneConfig) -> np.ndarray:
    """Rotate (n_q, H*D_k) queries head by head."""
    return merge_heads(rope_rotate(split_heads(Q_content, cfg.heads), positions, cfg.rope_base))


def pool_queries(Q_content: np.ndarray, strategy: str = "mean") -> np.ndarray:
    if strategy == "mean":
        return Q_content.mean(axis=0)
    if strategy == "last":
        return Q_content[-1].copy()
    raise ValueError(f"unknown pooling strategy {strategy!r}")


def project_query(weights: BackboneWeights, question_tokens, n_mem: int = 0) -> QueryVectors:
    cfg = weights.cfg
    X = np.asarray(question_tokens, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] < 1:
        raise ValueError("a question needs at least one token")
    if X.shape[1] != cfg.input_dim:
        raise ValueError(f"question dim {X.shape[1]} != backbone input dim {cfg.input_dim}")
    positions = question_positions(n_mem, X.shape[0])
    pooled, Qs, Qc = [], [], []
    for lw in weights.layers:
        content = X @ lw.W_Q
        Qc.append(content)
        Qs.append(rotate_queries(content, positions, cfg))
        pooled.append(pool_queries(content, cfg.query_pooling))
    return QueryVectors(tuple(pooled), tuple(Qs), tuple(Qc), positions)
