"""Deterministic float64 kernels shared across the pipeline."""

from __future__ import annotations

import numpy as np

NORM_EPS = 1e-12
ROPE_BASE = 10000.0


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def cosine(a, b) -> float:
    """Cosine similarity; 0.0 when either vector has (near-)zero norm."""
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    c = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, c))


def cosine_rows(A, B) -> np.ndarray:
    """Row-wise cosine between two equally shaped matrices (same zero-norm rule)."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    dots = np.einsum("ij,ij->i", A, B)
    ok = (na >= NORM_EPS) & (nb >= NORM_EPS)
    out = np.zeros(A.shape[0])
    out[ok] = dots[ok] / (na[ok] * nb[ok])
    return np.clip(out, -1.0, 1.0)


def cosine_against(q, G) -> np.ndarray:
    """Cosine of one vector against every row of ``G``."""
    q = as_vector(q)
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2:
        raise ValueError("G must be 2-D")
    if G.shape[0] == 0:
        return np.zeros(0)
    if G.shape[1] != q.shape[0]:
        raise ValueError(f"dimension mismatch: {q.shape[0]} vs {G.shape[1]}")
    return cosine_rows(np.broadcast_to(q, G.shape), G)


def softmax_row(x) -> np.ndarray:
    x = as_vector(x)
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    return softmax(x, axis=-1)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def rope_angles(positions, dim: int, base: float = ROPE_BASE) -> np.ndarray:
    """Rotation angles, shape (len(positions), dim // 2)."""
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    return np.outer(pos, inv_freq)


def rope_rotate(x, positions, base: float = ROPE_BASE) -> np.ndarray:
    """Rotate the last axis of ``x`` pairwise, (2i, 2i+1), by ``position * base^(-2i/dim)``.

    ``x`` has shape (..., n, dim) and ``positions`` has length n. Positions
    may be negative, which undoes a previous rotation.
    """
    x = np.asarray(x, dtype=np.float64)
    dim = x.shape[-1]
    if dim % 2:
        raise ValueError(f"rotary embedding needs an even dimension, got {dim}")
    ang = rope_angles(positions, dim, base)
    if ang.shape[0] != x.shape[-2]:
        raise ValueError("one position per row is required")
    cos, sin = np.cos(ang), np.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_apply(v, position: int, base: float = ROPE_BASE) -> np.ndarray:
    v = as_vector(v)
    if position < 0:
        raise ValueError("position must be non-negative")
    return rope_rotate(v[None, :], [position], base)[0]


def scaled_dot_attention(Q, K, V, scale: float, return_weights: bool = False):
    """softmax(Q K^T * scale) V, row by row."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ValueError("Q, K, V must be 2-D")
    if Q.shape[1] != K.shape[1]:
        raise ValueError(f"Q/K width mismatch: {Q.shape[1]} vs {K.shape[1]}")
    if K.shape[0] != V.shape[0]:
        raise ValueError(f"K/V row mismatch: {K.shape[0]} vs {V.shape[0]}")
    if K.shape[0] == 0:
        raise ValueError("attention over an empty key set")
    w = softmax((Q @ K.T) * scale, axis=-1)
    out = w @ V
    return (out, w) if return_weights else out
