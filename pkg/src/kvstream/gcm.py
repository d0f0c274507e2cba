"""Frozen single-layer GRU that compresses a block's keys into one index vector."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backbone import LayerKV, merge_heads
from .rng import keyed_uniform

GRU_INIT_SCHEMES = ("uniform", "identity")


@dataclass(frozen=True)
class GruParams:
    W_r: np.ndarray  # (input_dim, hidden)
    W_z: np.ndarray
    W_h: np.ndarray
    U_r: np.ndarray  # (hidden, hidden)
    U_z: np.ndarray
    U_h: np.ndarray
    b_r: np.ndarray  # (hidden,)
    b_z: np.ndarray
    b_h: np.ndarray
    seed: int = 0
    scheme: str = "uniform"

    @property
    def input_dim(self) -> int:
        return self.W_r.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W_r.shape[1]


@dataclass(frozen=True)
class BlockKey:
    block_id: int
    layer: int
    g: np.ndarray


def init_gru(input_dim: int, hidden_dim: int | None = None, seed: int = 0, scheme: str = "uniform") -> GruParams:
    """Frozen GRU weights drawn U(-1/sqrt(hidden), 1/sqrt(hidden)), zero biases.

    ``scheme="identity"`` replaces the candidate input map ``W_h`` with the
    (rectangular) identity, so the hidden state tracks a gated running summary
    of the inputs in their own coordinates instead of a random rotation of them.
    """
    hidden_dim = input_dim if hidden_dim is None else hidden_dim
    if input_dim < 1 or hidden_dim < 1:
        raise ValueError("GRU dims must be positive")
    if scheme not in GRU_INIT_SCHEMES:
        raise ValueError(f"scheme must be one of {GRU_INIT_SCHEMES}")
    bound = 1.0 / np.sqrt(hidden_dim)

    def draw(name, shape):
        return keyed_uniform(seed, ("gru", name), shape, bound)

    mats = {
        name: draw(name, (input_dim, hidden_dim)) for name in ("W_r", "W_z", "W_h")
    }
    mats.update({name: draw(name, (hidden_dim, hidden_dim)) for name in ("U_r", "U_z", "U_h")})
    if scheme == "identity":
        mats["W_h"] = np.eye(input_dim, hidden_dim)
    zeros = {name: np.zeros(hidden_dim) for name in ("b_r", "b_z", "b_h")}
    for arr in list(mats.values()) + list(zeros.values()):
        arr.setflags(write=False)
    return GruParams(**mats, **zeros, seed=seed, scheme=scheme)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_step(params: GruParams, h_prev, x) -> np.ndarray:
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.input_dim,) or h_prev.shape != (params.hidden_dim,):
        raise ValueError(
            f"expected x ({params.input_dim},) and h ({params.hidden_dim},), "
            f"got {x.shape} and {h_prev.shape}"
        )
    r = _sigmoid(x @ params.W_r + h_prev @ params.U_r + params.b_r)
    z = _sigmoid(x @ params.W_z + h_prev @ params.U_z + params.b_z)
    h_tilde = np.tanh(x @ params.W_h + (r * h_prev) @ params.U_h + params.b_h)
    return (1.0 - z) * h_prev + z * h_tilde


def reshape_keys(kv: LayerKV, rotated: bool = False) -> np.ndarray:
    """(H, B, D_k) -> (B, H*D_k), heads concatenated in ascending order.

    Uses the unrotated key content unless ``rotated`` is set.
    """
    K = kv.K if rotated or kv.K_content is None else kv.K_content
    return merge_heads(K)


def compress_sequence(params: GruParams, xs: np.ndarray) -> np.ndarray:
    h = np.zeros(params.hidden_dim)
    for x in xs:
        h = gru_step(params, h, x)
    return h


def compress_block(params: GruParams, kv: LayerKV) -> BlockKey:
    return BlockKey(kv.block_id, kv.layer, compress_sequence(params, reshape_keys(kv)))


def mean_pool_key(kv: LayerKV, hidden_dim: int | None = None) -> BlockKey:
    xs = reshape_keys(kv)
    if hidden_dim is not None and hidden_dim != xs.shape[1]:
        raise ValueError(f"mean pooling needs hidden_dim == {xs.shape[1]}, got {hidden_dim}")
    # exactly rounded column sums, so any token permutation gives identical bits
    sums = np.array([math.fsum(col) for col in xs.T])
    return BlockKey(kv.block_id, kv.layer, sums / xs.shape[0])
