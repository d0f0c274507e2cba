"""Answering pass over rehydrated global blocks plus the local hot window."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backbone import BackboneConfig, QueryVectors, LayerKV, merge_heads, question_positions, rotate_queries
from .numerics import rope_rotate, scaled_dot_attention

POSITION_MODES = ("original", "contiguous")
LOCAL = "local"


class InvalidContextError(RuntimeError):
    pass


@dataclass(frozen=True)
class AnswerContext:
    K: tuple[np.ndarray, ...]  # per layer (H, n_mem, D_k), rotated
    V: tuple[np.ndarray, ...]
    positions: np.ndarray  # (n_mem,) rotary position of each row
    row_block: np.ndarray  # (n_mem,) source block id
    row_slot: np.ndarray  # (n_mem,) token slot inside its block
    row_is_local: np.ndarray  # bool
    pad_mask: np.ndarray  # bool
    retrieved_ids: tuple[int, ...]
    local_ids: tuple[int, ...]
    block_size: int

    @property
    def n_mem(self) -> int:
        return len(self.positions)

    @property
    def n_local_tokens(self) -> int:
        return int(self.row_is_local.sum())


@dataclass(frozen=True)
class AttentionOutput:
    outputs: tuple[np.ndarray, ...]  # per layer (n_q, H*D_k)
    block_mass: dict[int, float]  # mean attention mass per source block
    weights: tuple[np.ndarray, ...] | None = None  # per layer (H, n_q, n_mem)


def _stack(blocks: Sequence[Sequence[LayerKV]], attr: str, layer: int) -> np.ndarray:
    return np.concatenate([getattr(b[layer], attr) for b in blocks], axis=1)


def build_context(
    retrieved: Sequence[Sequence[LayerKV]],
    hot: Sequence[Sequence[LayerKV]],
    position_mode: str = "original",
    rope_base: float = 10000.0,
) -> AnswerContext:
    """Rows: retrieved blocks by ascending id, then hot blocks by ascending id."""
    if position_mode not in POSITION_MODES:
        raise ValueError(f"position_mode must be one of {POSITION_MODES}")
    retrieved = sorted(retrieved, key=lambda b: b[0].block_id)
    hot = sorted(hot, key=lambda b: b[0].block_id)
    r_ids = tuple(b[0].block_id for b in retrieved)
    h_ids = tuple(b[0].block_id for b in hot)
    if set(r_ids) & set(h_ids):
        raise InvalidContextError(f"blocks in both tiers: {sorted(set(r_ids) & set(h_ids))}")
    if len(set(r_ids)) != len(r_ids) or len(set(h_ids)) != len(h_ids):
        raise InvalidContextError("duplicate block in context")
    blocks = list(retrieved) + list(hot)
    if not blocks:
        raise InvalidContextError("empty context")
    B = blocks[0][0].num_tokens
    L = len(blocks[0])
    positions = np.concatenate([b[0].positions for b in blocks]).astype(np.int64)
    row_block = np.concatenate([np.full(b[0].num_tokens, b[0].block_id) for b in blocks])
    row_slot = np.concatenate([np.arange(b[0].num_tokens) for b in blocks])
    row_local = np.concatenate(
        [np.full(b[0].num_tokens, i >= len(retrieved)) for i, b in enumerate(blocks)]
    )
    pads = np.concatenate(
        [
            b[0].pad_mask if b[0].pad_mask is not None else np.zeros(b[0].num_tokens, bool)
            for b in blocks
        ]
    )
    Ks = [_stack(blocks, "K", layer) for layer in range(L)]
    Vs = [_stack(blocks, "V", layer) for layer in range(L)]
    if position_mode == "contiguous":
        new_pos = np.arange(1, len(positions) + 1, dtype=np.int64)
        Ks = [rope_rotate(K, new_pos - positions, rope_base) for K in Ks]
        positions = new_pos
    return AnswerContext(
        tuple(Ks), tuple(Vs), positions, row_block, row_slot, row_local, pads, r_ids, h_ids, B
    )


def assign_question_positions(n_mem: int, n_q: int) -> list[int]:
    return question_positions(n_mem, n_q).tolist()


def answer_pass(
    ctx: AnswerContext,
    queries: QueryVectors,
    cfg: BackboneConfig,
    mask_pads: bool = False,
    keep_weights: bool = False,
) -> AttentionOutput:
    n_q = queries.n_q
    positions = question_positions(ctx.n_mem, n_q)
    if len(queries.Q_content) != len(ctx.K):
        raise ValueError(f"{len(queries.Q_content)} query layers vs {len(ctx.K)} context layers")
    H, _, Dk = ctx.K[0].shape
    if H != cfg.heads or Dk != cfg.head_dim:
        raise ValueError("context head shape does not match backbone config")
    keep = ~ctx.pad_mask if mask_pads else np.ones(ctx.n_mem, dtype=bool)
    if not keep.any():
        raise InvalidContextError("every context row is masked")
    scale = 1.0 / np.sqrt(Dk)
    outs, all_w = [], []
    mass = np.zeros(ctx.n_mem)
    for layer, Qc in enumerate(queries.Q_content):
        Q = rotate_queries(Qc, positions, cfg).reshape(n_q, H, Dk)
        head_out = np.empty((H, n_q, Dk))
        layer_w = np.zeros((H, n_q, ctx.n_mem))
        for h in range(H):
            out, w = scaled_dot_attention(
                Q[:, h, :], ctx.K[layer][h][keep], ctx.V[layer][h][keep], scale, return_weights=True
            )
            head_out[h] = out
            layer_w[h][:, keep] = w
        outs.append(merge_heads(head_out))
        all_w.append(layer_w)
        mass += layer_w.sum(axis=(0, 1))
    mass /= len(queries.Q_content) * H * n_q
    block_mass: dict[int, float] = {}
    for bid, m in zip(ctx.row_block.tolist(), mass.tolist()):
        block_mass[bid] = block_mass.get(bid, 0.0) + m
    return AttentionOutput(tuple(outs), block_mass, tuple(all_w) if keep_weights else None)


def context_size(ctx: AnswerContext | None, n_q: int) -> tuple[int, int]:
    """(attended tokens, (n_local_tokens + retrieved_blocks * B)^2)."""
    if ctx is None:
        return n_q, 0
    bound = (ctx.n_local_tokens + len(ctx.retrieved_ids) * ctx.block_size) ** 2
    return ctx.n_mem + n_q, bound
