"""Synthetic streams, end-to-end pipeline runs, oracles and ablations.

Background features follow ``x_t = normalize(rho * x_{t-1} + (1 - rho) * u_t)``
with ``u_t`` a fresh unit Gaussian direction. For unit vectors the expected
consecutive-frame cosine is about ``rho / sqrt(rho^2 + (1 - rho)^2)``, which
is the knob for steering the token-drop regime.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .attend import AnswerContext, AttentionOutput, answer_pass, build_context, context_size
from .backbone import BackboneWeights, QueryVectors, init_backbone, project_block, project_query
from .cache import MemoryMonitor, TieredCache
from .config import RunConfig
from .dtd import DropStats, FrameFeatures, StreamPruner
from .gcm import GruParams, compress_block, init_gru, mean_pool_key
from .packer import Block, PackerState
from .retrieval import RetrievalSet, retrieve
from .rng import keyed_generator, keyed_uniform

ORACLE_MAX_TOKENS = 20_000


class OracleSizeError(ValueError):
    pass


def _normalize(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# ---------------------------------------------------------------- streams


@dataclass(frozen=True)
class Event:
    frame: int  # 1-based
    patches: tuple[int, ...]
    signal: np.ndarray  # (D,) or (len(patches), D)
    tag: str = "event"


@dataclass(frozen=True)
class StreamSpec:
    frames: int
    patches: int
    dim: int
    rho: float = 0.5
    seed: int = 0
    events: tuple[Event, ...] = ()

    def __post_init__(self):
        if self.frames < 1 or self.patches < 1 or self.dim < 1:
            raise ValueError("frames, patches and dim must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        for ev in self.events:
            if not 1 <= ev.frame <= self.frames:
                raise ValueError(f"event frame {ev.frame} outside [1, {self.frames}]")

    def schedule(self, tag: str | None = None) -> set[tuple[int, int]]:
        return {
            (ev.frame, p) for ev in self.events if tag is None or ev.tag == tag for p in ev.patches
        }


def gen_array(spec: StreamSpec) -> np.ndarray:
    rng = keyed_generator(spec.seed, "stream")
    T, P, D = spec.frames, spec.patches, spec.dim
    out = np.empty((T, P, D))
    x = _normalize(rng.standard_normal((P, D)))
    out[0] = x
    for t in range(1, T):
        fresh = _normalize(rng.standard_normal((P, D)))
        if spec.rho != 1.0:
            x = _normalize(spec.rho * x + (1.0 - spec.rho) * fresh)
        out[t] = x
    for ev in spec.events:
        out[ev.frame - 1, list(ev.patches)] = ev.signal
    return out


def gen_stream(spec: StreamSpec) -> list[FrameFeatures]:
    return [FrameFeatures(t + 1, f) for t, f in enumerate(gen_array(spec))]


def frames_from_array(arr) -> list[FrameFeatures]:
    return [FrameFeatures(t + 1, np.asarray(f, dtype=np.float64)) for t, f in enumerate(arr)]


def plant_needle(spec: StreamSpec, needle, frame_range: tuple[int, int], noise: float = 0.05) -> StreamSpec:
    """Overwrite every patch of frames ``frame_range[0]..frame_range[1]`` with
    noisy copies of ``needle``.

    Consecutive planted frames are near-duplicates and mostly dropped by the
    pruner, so a full needle-only block is guaranteed when ``patches >= 2 * B``.
    """
    first, last = frame_range
    if not 1 <= first <= last <= spec.frames:
        raise ValueError(f"frame range {frame_range} outside [1, {spec.frames}]")
    needle = np.asarray(needle, dtype=np.float64)
    if needle.shape != (spec.dim,):
        raise ValueError(f"needle must have dim {spec.dim}")
    direction = needle / np.linalg.norm(needle)
    events = list(spec.events)
    for frame in range(first, last + 1):
        rng = keyed_generator(spec.seed, "needle-noise", frame)
        jitter = rng.standard_normal((spec.patches, spec.dim)) / np.sqrt(spec.dim)
        signal = _normalize(direction + noise * jitter)
        events.append(Event(frame, tuple(range(spec.patches)), signal, tag="needle"))
    return replace(spec, events=tuple(events))


def needle_direction(dim: int, seed: int) -> np.ndarray:
    return _normalize(keyed_generator(seed, "needle").standard_normal(dim))


def random_question(dim: int, n_q: int, seed: int) -> np.ndarray:
    return _normalize(keyed_generator(seed, "question").standard_normal((n_q, dim)))


# ---------------------------------------------------------------- pipeline


@dataclass
class IngestResult:
    cfg: RunConfig
    weights: BackboneWeights
    gru: GruParams | None
    cache: TieredCache
    monitor: MemoryMonitor
    stats: DropStats
    blocks: list[Block]
    latency_ms: dict[str, float]
    truncated: bool = False


@dataclass
class AnswerResult:
    queries: QueryVectors
    retrieval: RetrievalSet
    context: AnswerContext | None
    output: AttentionOutput | None
    attended_tokens: int
    complexity_bound: int
    latency_ms: dict[str, float]


@dataclass
class ExperimentReport:
    drop_percent: float
    kept_tokens: int
    total_tokens: int
    residual_discarded: int
    blocks_emitted: int
    cold_blocks: int
    retrieved: list[int]
    provenance: list[str]
    recall_at_k: float | None
    oracle_max_abs_err: float | None
    attended_tokens: int
    complexity_bound: int
    memory: dict
    memory_violations: int
    latency_ms: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def build_gru(cfg: RunConfig) -> GruParams | None:
    if cfg.compressor != "gru":
        return None
    return init_gru(cfg.heads * cfg.head_dim, cfg.key_dim, cfg.gru_seed, cfg.gru_init)


def ingest(
    frames: Iterable[FrameFeatures],
    cfg: RunConfig,
    max_blocks: int | None = None,
    store=None,
) -> IngestResult:
    frames = list(frames)
    if not frames:
        raise ValueError("empty stream")
    t0 = time.perf_counter()
    weights = init_backbone(cfg.backbone(frames[0].dim))
    gru = build_gru(cfg)
    cache = TieredCache(cfg.cache(), cfg.layers, gru, store)
    monitor = MemoryMonitor(cfg.n_local_blocks, cfg.block_size)
    cache.observers.append(monitor)
    pruner = StreamPruner(cfg.dtd())
    packer = PackerState(cfg.packer())
    blocks: list[Block] = []
    truncated = False

    def admit(new_blocks):
        nonlocal truncated
        for blk in new_blocks:
            if max_blocks is not None and len(blocks) >= max_blocks:
                truncated = True
                return
            blocks.append(blk)
            cache.admit_block(blk.block_id, project_block(weights, blk))

    for frame in frames:
        admit(packer.push(pruner.push(frame)))
        if truncated:
            break
    if not truncated:
        admit(packer.finalize())
    stats = pruner.stats
    stats.residual_discarded = packer.residual_discarded
    latency = {"ingest": (time.perf_counter() - t0) * 1e3}
    return IngestResult(cfg, weights, gru, cache, monitor, stats, blocks, latency, truncated)


def query_map_for(cfg: RunConfig):
    """Seeded linear map from query space to key space when their dims differ."""
    model_dim = cfg.heads * cfg.head_dim
    if cfg.key_dim == model_dim:
        return None
    mats = {
        layer: keyed_uniform(cfg.gru_seed, ("query-map", layer), (model_dim, cfg.key_dim), 1 / np.sqrt(model_dim))
        for layer in set(cfg.retrieval_layers())
    }
    return lambda layer, q: q @ mats[layer]


def answer(ing: IngestResult, question, cfg: RunConfig | None = None) -> AnswerResult:
    cfg = cfg or ing.cfg
    t0 = time.perf_counter()
    queries = project_query(ing.weights, question, 0)
    rset = retrieve(
        queries.pooled,
        ing.cache.index,
        cfg.top_k,
        cfg.first_layer,
        cfg.resolved_last_layer,
        cfg.retrieval_mode,
        query_map_for(cfg),
    )
    t1 = time.perf_counter()
    retrieved = ing.cache.rehydrate(rset.block_ids)
    hot = ing.cache.hot_layers
    ctx = None
    out = None
    if retrieved or hot:
        ctx = build_context(retrieved, hot, cfg.position_mode, ing.weights.cfg.rope_base)
        out = answer_pass(ctx, queries, ing.weights.cfg, cfg.mask_pads)
    attended, bound = context_size(ctx, queries.n_q)
    ing.monitor.check_answer(attended, cfg.top_k, queries.n_q)
    t2 = time.perf_counter()
    latency = {"retrieve": (t1 - t0) * 1e3, "answer": (t2 - t1) * 1e3}
    return AnswerResult(queries, rset, ctx, out, attended, bound, latency)


def needle_blocks(blocks: Sequence[Block], schedule: set[tuple[int, int]]) -> list[int]:
    """Blocks whose real (non-pad) tokens are at least half planted needle tokens."""
    out = []
    for blk in blocks:
        real = ~blk.pad_mask
        hits = sum(
            (int(t), int(p)) in schedule
            for t, p in zip(blk.frame_indices[real], blk.patch_indices[real])
        )
        if real.any() and 2 * hits >= int(real.sum()):
            out.append(blk.block_id)
    return out


def needle_recall(ing: IngestResult, rset: RetrievalSet, schedule) -> float | None:
    cold = set(ing.cache.cold_ids)
    targets = [b for b in needle_blocks(ing.blocks, schedule) if b in cold]
    if not targets:
        return None
    return 1.0 if any(b in rset for b in targets) else 0.0


def max_abs_error(a: AttentionOutput, b: AttentionOutput) -> float:
    return max(float(np.max(np.abs(x - y))) for x, y in zip(a.outputs, b.outputs))


def run_pipeline(
    frames: Sequence[FrameFeatures],
    question,
    cfg: RunConfig,
    max_blocks: int | None = None,
    needle: set[tuple[int, int]] | None = None,
    check_oracle: bool = False,
    store=None,
) -> tuple[ExperimentReport, IngestResult, AnswerResult]:
    frames = list(frames)
    ing = ingest(frames, cfg, max_blocks, store)
    ans = answer(ing, question, cfg)
    err = None
    if check_oracle:
        t0 = time.perf_counter()
        ref = full_attention_oracle(frames, question, ing.weights)
        err = float("inf") if ans.output is None else max_abs_error(ans.output, ref)
        ans.latency_ms["oracle"] = (time.perf_counter() - t0) * 1e3
    recall = needle_recall(ing, ans.retrieval, needle) if needle else None
    report = ExperimentReport(
        drop_percent=ing.stats.drop_percent,
        kept_tokens=ing.stats.kept_tokens,
        total_tokens=ing.stats.total_tokens,
        residual_discarded=ing.stats.residual_discarded,
        blocks_emitted=len(ing.blocks),
        cold_blocks=len(ing.cache.cold_ids),
        retrieved=list(ans.retrieval.block_ids),
        provenance=list(ans.retrieval.provenance),
        recall_at_k=recall,
        oracle_max_abs_err=err,
        attended_tokens=ans.attended_tokens,
        complexity_bound=ans.complexity_bound,
        memory=ing.cache.memory_report().as_dict(),
        memory_violations=len(ing.monitor.violations),
        latency_ms={**ing.latency_ms, **ans.latency_ms},
    )
    return report, ing, ans


# ---------------------------------------------------------------- oracle


def _rope_complex(X: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    """Rotary embedding via complex multiplication, pairs (2i, 2i+1)."""
    dim = X.shape[-1]
    freqs = 1.0 / base ** (np.arange(dim // 2) * 2.0 / dim)
    phase = np.exp(1j * np.outer(positions, freqs))
    z = (X[..., 0::2] + 1j * X[..., 1::2]) * phase
    out = np.empty_like(X)
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def full_attention_oracle(
    frames: Sequence[FrameFeatures],
    question,
    weights: BackboneWeights,
    max_tokens: int = ORACLE_MAX_TOKENS,
) -> AttentionOutput:
    """Quadratic reference: every token of every frame, positions 1..N, no dropping or blocking."""
    X = np.concatenate([f.features for f in frames], axis=0)
    N = X.shape[0]
    if N > max_tokens:
        raise OracleSizeError(f"{N} tokens exceeds oracle limit {max_tokens}")
    Xq = np.asarray(question, dtype=np.float64)
    if Xq.ndim == 1:
        Xq = Xq[None, :]
    if Xq.shape[0] == 0:
        raise ValueError("empty question")
    cfg = weights.cfg
    H, dk = cfg.heads, cfg.head_dim
    pos_k = np.arange(1, N + 1)
    pos_q = np.arange(N + 1, N + 1 + Xq.shape[0])
    outs = []
    for lw in weights.layers:
        K, V, Q = X @ lw.W_K, X @ lw.W_V, Xq @ lw.W_Q
        heads = []
        for h in range(H):
            sl = slice(h * dk, (h + 1) * dk)
            k = _rope_complex(K[:, sl], pos_k, cfg.rope_base)
            q = _rope_complex(Q[:, sl], pos_q, cfg.rope_base)
            logits = q @ k.T / np.sqrt(dk)
            logits -= logits.max(axis=1, keepdims=True)
            w = np.exp(logits)
            w /= w.sum(axis=1, keepdims=True)
            heads.append(w @ V[:, sl])
        outs.append(np.concatenate(heads, axis=1))
    return AttentionOutput(tuple(outs), {})


# ---------------------------------------------------------------- ablations


def run_ablation_tau(frames, question, cfg: RunConfig, taus=(0.25, 0.5, 0.75), needle=None):
    reports = [run_pipeline(frames, question, cfg.replace(tau_feat=t), needle=needle)[0] for t in taus]
    drops = [r.drop_percent for r in reports]
    monotone = all(a >= b for a, b in zip(drops, drops[1:])) if list(taus) == sorted(taus) else None
    return reports, monotone


def swap_discriminator(block: Block, weights: BackboneWeights, gru: GruParams, layer: int) -> dict:
    """Swap two distinct tokens of ``block``; report whether GRU / mean keys move."""
    X = block.features
    i = 0
    j = next((j for j in range(1, len(X)) if not np.array_equal(X[j], X[i])), None)
    if j is None:
        return {"swapped": None, "gru_diff": 0.0, "mean_diff": 0.0}
    perm = np.arange(len(X))
    perm[[i, j]] = perm[[j, i]]
    swapped = replace(
        block,
        features=X[perm],
        frame_indices=block.frame_indices[perm],
        patch_indices=block.patch_indices[perm],
    )
    a = project_block(weights, block)[layer]
    b = project_block(weights, swapped)[layer]
    return {
        "swapped": [i, j],
        "gru_diff": float(np.linalg.norm(compress_block(gru, a).g - compress_block(gru, b).g)),
        "mean_diff": float(np.max(np.abs(mean_pool_key(a).g - mean_pool_key(b).g))),
    }


def run_ablation_pooling(frames, question, cfg: RunConfig, needle=None, max_blocks=None):
    gru_cfg = cfg.replace(compressor="gru")
    rep_gru, ing, _ = run_pipeline(frames, question, gru_cfg, max_blocks, needle)
    rep_mean, _, _ = run_pipeline(frames, question, cfg.replace(compressor="mean"), max_blocks, needle)
    targets = needle_blocks(ing.blocks, needle) if needle else []
    blk = next((b for b in ing.blocks if b.block_id in targets), ing.blocks[0] if ing.blocks else None)
    disc = None
    if blk is not None:
        disc = swap_discriminator(blk, ing.weights, ing.gru, cfg.resolved_last_layer)
        disc["block_id"] = blk.block_id
    return {"gru": rep_gru, "mean": rep_mean, "discriminator": disc}


def run_ablation_consensus(frames, question, cfg: RunConfig, needle=None, max_blocks=None):
    ing = ingest(frames, cfg, max_blocks)
    out = {}
    for mode in ("consensus", "last_only"):
        ans = answer(ing, question, cfg.replace(retrieval_mode=mode))
        out[mode] = {
            "retrieved": list(ans.retrieval.block_ids),
            "provenance": list(ans.retrieval.provenance),
            "recall_at_k": needle_recall(ing, ans.retrieval, needle) if needle else None,
        }
    a, b = set(out["consensus"]["retrieved"]), set(out["last_only"]["retrieved"])
    out["overlap"] = len(a & b) / max(1, max(len(a), len(b)))
    out["memory_violations"] = len(ing.monitor.violations)
    return out


# ---------------------------------------------------------------- needle experiment


# Calibrated on seeds 0..99 with the defaults below: every seed recalls the
# needle block, so 95/100 leaves room for generator changes without masking
# a real regression.
NEEDLE_RECALL_MIN = 95


@dataclass(frozen=True)
class NeedleSetup:
    """Calibrated desk-scale needle experiment (see README)."""

    cold_blocks: int = 32
    top_k: int = 4
    n_local_blocks: int = 4
    block_size: int = 16
    patches: int = 48
    dim: int = 16
    rho: float = 0.3
    tau: float = 0.5
    needle_frame: int = 4
    frames: int = 60
    noise: float = 0.05
    n_q: int = 1

    def run_config(self, **overrides) -> RunConfig:
        base = dict(
            tau_feat=self.tau,
            block_size=self.block_size,
            n_local_blocks=self.n_local_blocks,
            top_k=self.top_k,
        )
        base.update(overrides)
        return RunConfig(**base)


def needle_stream(setup: NeedleSetup, seed: int, with_needle: bool = True):
    spec = StreamSpec(setup.frames, setup.patches, setup.dim, setup.rho, seed)
    needle = needle_direction(setup.dim, seed)
    if with_needle:
        spec = plant_needle(spec, needle, (setup.needle_frame, setup.needle_frame), setup.noise)
    q_rng = keyed_generator(seed, "needle-question")
    question = _normalize(needle + setup.noise * q_rng.standard_normal((setup.n_q, setup.dim)) / np.sqrt(setup.dim))
    return spec, gen_stream(spec), question


def needle_trial(setup: NeedleSetup, seed: int, cfg: RunConfig | None = None):
    cfg = cfg or setup.run_config()
    spec, frames, question = needle_stream(setup, seed)
    total = setup.cold_blocks + cfg.n_local_blocks
    report, ing, ans = run_pipeline(frames, question, cfg, total, spec.schedule("needle"))
    if len(ing.cache.cold_ids) != setup.cold_blocks:
        raise RuntimeError(f"seed {seed}: stream produced {len(ing.cache.cold_ids)} cold blocks")
    return report, ing, ans
