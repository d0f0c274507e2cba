"""Command-line entry point.

Exit codes: 0 success, 1 assertion/oracle/checksum failure, 2 usage or input error.
Metrics are emitted as one JSON object per line.
"""

from __future__ import annotations

import argparse
import functools
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cache import DirectoryColdStore, ColdStoreCorruptionError, deserialize_record, parse_header
from .config import RunConfig
from .harness import (
    NeedleSetup,
    OracleSizeError,
    StreamSpec,
    frames_from_array,
    gen_array,
    needle_direction,
    needle_stream,
    plant_needle,
    random_question,
    run_ablation_consensus,
    run_ablation_pooling,
    run_ablation_tau,
    run_pipeline,
)
from .streamio import StreamFormatError, read_stream, write_stream

SCHEMA = "kvstream.metrics/1"
CONFIG_ENV = "KVSTREAM_CONFIG"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
ORACLE_TOL = 1e-9


class UsageError(Exception):
    pass


@functools.lru_cache(maxsize=1)
def build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def emit(record: dict, out=None) -> None:
    out = out or sys.stdout
    base = {"schema": SCHEMA, "build": build_id()}
    base.update(record)
    out.write(json.dumps(_jsonable(base), sort_keys=True) + "\n")
    out.flush()


# ---------------------------------------------------------------- config


CONFIG_FLAGS = {
    # flag dest -> RunConfig field
    "tau": "tau_feat",
    "block_size": "block_size",
    "layers": "layers",
    "heads": "heads",
    "head_dim": "head_dim",
    "backbone_seed": "backbone_seed",
    "qk_coupling": "qk_coupling",
    "query_pooling": "query_pooling",
    "compressor": "compressor",
    "gru_seed": "gru_seed",
    "gru_hidden": "gru_hidden",
    "gru_init": "gru_init",
    "n_local": "n_local_blocks",
    "index_layers": "index_layers",
    "cold_store": "cold_store_path",
    "cold_version": "cold_version",
    "top_k": "top_k",
    "retrieval_mode": "retrieval_mode",
    "position_mode": "position_mode",
    "mask_pads": "mask_pads",
}


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline configuration (overrides the config file)")
    g.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    g.add_argument("--tau", type=float)
    g.add_argument("--block-size", type=int)
    g.add_argument("--layers", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--head-dim", type=int)
    g.add_argument("--backbone-seed", type=int)
    g.add_argument("--qk-coupling", type=float)
    g.add_argument("--query-pooling", choices=["mean", "last"])
    g.add_argument("--compressor", choices=["gru", "mean"])
    g.add_argument("--gru-seed", type=int)
    g.add_argument("--gru-hidden", type=int)
    g.add_argument("--gru-init", choices=["uniform", "identity"])
    g.add_argument("--n-local", type=int)
    g.add_argument("--index-layers", type=lambda s: tuple(int(x) for x in s.split(",")))
    g.add_argument("--cold-store")
    g.add_argument("--cold-version", type=int, choices=[1, 2])
    g.add_argument("--top-k", type=int)
    g.add_argument("--retrieval-mode", choices=["consensus", "last_only"])
    g.add_argument("--position-mode", choices=["original", "contiguous"])
    g.add_argument("--mask-pads", action="store_true", default=None)


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    data = (base or RunConfig()).to_dict()
    path = args.config or os.environ.get(CONFIG_ENV)
    if path:
        try:
            with open(path) as fh:
                data.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
    for dest, name in CONFIG_FLAGS.items():
        val = getattr(args, dest, None)
        if val is not None:
            data[name] = val
    try:
        return RunConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def load_input(path):
    try:
        return read_stream(path)
    except FileNotFoundError:
        raise UsageError(f"input file not found: {path}") from None
    except (OSError, StreamFormatError) as exc:
        raise UsageError(f"cannot read stream {path}: {exc}") from exc


def build_question(args, stream) -> np.ndarray:
    T, P, D = stream.shape
    if args.question_from:
        try:
            f, p = (int(x) for x in args.question_from.split(":"))
        except ValueError:
            raise UsageError("--question-from expects FRAME:PATCH") from None
        if not (1 <= f <= T and 0 <= p < P):
            raise UsageError(f"--question-from {f}:{p} outside the stream")
        return stream.features[f - 1, p].astype(np.float64)[None, :]
    if args.n_q < 1:
        raise UsageError("--n-q must be >= 1")
    return random_question(D, args.n_q, args.question_seed)


def _report_record(report) -> dict:
    d = report.as_dict()
    latency = d.pop("latency_ms")
    return {"report": d, "latency_ms": latency}


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    if not 0.0 <= args.rho <= 1.0:
        raise UsageError("--rho must lie in [0, 1]")
    try:
        spec = StreamSpec(args.frames, args.patches, args.dim, args.rho, args.seed)
        if args.needle_frame is not None:
            spec = plant_needle(spec, needle_direction(spec.dim, args.seed), (args.needle_frame, args.needle_frame))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    arr = gen_array(spec)
    nbytes = write_stream(args.output, arr, args.seed)
    print(
        f"wrote {args.output}: frames={spec.frames} patches={spec.patches} dim={spec.dim} "
        f"tokens={spec.frames * spec.patches} bytes={nbytes}"
    )
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    stream = load_input(args.input)
    question = build_question(args, stream)
    frames = stream.frames()
    try:
        report, ing, _ = run_pipeline(frames, question, cfg, args.max_blocks, check_oracle=args.check_oracle)
    except OracleSizeError as exc:
        raise UsageError(str(exc)) from exc
    except ValueError as exc:
        raise UsageError(f"pipeline rejected input: {exc}") from exc
    record = {
        "command": "run",
        "input": str(args.input),
        "config": cfg.to_dict(),
        "seeds": {
            "stream": stream.seed,
            "backbone": cfg.backbone_seed,
            "gru": cfg.gru_seed,
            "question": None if args.question_from else args.question_seed,
        },
        "question": {"from": args.question_from, "n_q": int(question.shape[0])},
        **_report_record(report),
    }
    emit(record)
    failed = report.memory_violations > 0
    if args.check_oracle and not (report.oracle_max_abs_err is not None and report.oracle_max_abs_err < ORACLE_TOL):
        print(f"oracle mismatch: max abs err {report.oracle_max_abs_err} >= {ORACLE_TOL}", file=sys.stderr)
        failed = True
    return EXIT_FAIL if failed else EXIT_OK


def _needle_inputs(setup: NeedleSetup, seed: int):
    spec, frames, question = needle_stream(setup, seed)
    return frames, question, spec.schedule("needle")


def cmd_ablate(args) -> int:
    setup = NeedleSetup()
    base = resolve_config(args, setup.run_config() if not args.input else None)
    if args.input:
        stream = load_input(args.input)
        inputs = [(stream.frames(), build_question(args, stream), None)]
        max_blocks = None
    else:
        inputs = [_needle_inputs(setup, s) for s in range(args.seed, args.seed + args.seeds)]
        max_blocks = setup.cold_blocks + base.n_local_blocks
    common = {"command": "ablate", "which": args.which, "config": base.to_dict(),
              "input": str(args.input) if args.input else "needle", "seeds": list(range(args.seed, args.seed + args.seeds)) if not args.input else None}
    status = EXIT_OK

    if args.which == "tau":
        taus = sorted(args.taus)
        per_tau = {t: [] for t in taus}
        monotone = True
        for frames, question, needle in inputs:
            reports, mono = run_ablation_tau(frames, question, base, taus, needle)
            monotone &= bool(mono)
            for t, r in zip(taus, reports):
                per_tau[t].append(r)
        for i, t in enumerate(taus):
            reps = per_tau[t]
            emit({**common, "index": i, "tau_feat": t,
                  "drop_percent": [r.drop_percent for r in reps],
                  "kept_tokens": [r.kept_tokens for r in reps],
                  "monotone": monotone})
        if not monotone:
            status = EXIT_FAIL

    elif args.which == "pooling":
        rows = {"gru": [], "mean": []}
        disc = []
        for frames, question, needle in inputs:
            res = run_ablation_pooling(frames, question, base, needle, max_blocks)
            for k in rows:
                rows[k].append(res[k])
            disc.append(res["discriminator"])
        for i, k in enumerate(("gru", "mean")):
            recalls = [r.recall_at_k for r in rows[k]]
            emit({**common, "index": i, "compressor": k, "recall_at_k": recalls,
                  "recall_rate": _rate(recalls),
                  "key_changed_by_swap": [d and (d["gru_diff" if k == "gru" else "mean_diff"] > 0) for d in disc]})
        if any(d and d["mean_diff"] != 0.0 for d in disc):
            status = EXIT_FAIL

    else:
        rows = {"consensus": [], "last_only": []}
        overlaps = []
        for frames, question, needle in inputs:
            res = run_ablation_consensus(frames, question, base, needle, max_blocks)
            for k in rows:
                rows[k].append(res[k])
            overlaps.append(res["overlap"])
            if res["memory_violations"]:
                status = EXIT_FAIL
        for i, k in enumerate(("consensus", "last_only")):
            recalls = [r["recall_at_k"] for r in rows[k]]
            emit({**common, "index": i, "retrieval_mode": k, "recall_at_k": recalls,
                  "recall_rate": _rate(recalls), "retrieved": [r["retrieved"] for r in rows[k]],
                  "overlap": overlaps})
    return status


def _rate(values):
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        files = sorted(path.glob(f"block_*{DirectoryColdStore.suffix}"))
    elif path.is_file():
        files = [path]
    else:
        raise UsageError(f"no such cold store: {path}")
    bad = 0
    total = 0
    for f in files:
        data = f.read_bytes()
        total += len(data)
        try:
            hdr = parse_header(data)
            deserialize_record(data)
            status = "ok"
        except ColdStoreCorruptionError as exc:
            status = f"CORRUPT ({exc})"
            bad += 1
            hdr = None
        if hdr:
            shape = f"L={hdr['layers']} H={hdr['heads']} B={hdr['block_size']} D_k={hdr['head_dim']} v{hdr['version']}"
            print(f"block {hdr['block_id']:>6}  {shape}  {len(data):>10} bytes  checksum {status}")
        else:
            print(f"{f.name}  {len(data):>10} bytes  checksum {status}")
    print(f"{len(files)} blocks, {total} bytes, {bad} corrupt")
    return EXIT_FAIL if bad else EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvstream", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic feature-stream file")
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--patches", type=int, required=True)
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--rho", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--needle-frame", type=int)
    g.add_argument("--output", "-o", required=True)
    g.set_defaults(func=cmd_gen)

    def question_flags(p):
        p.add_argument("--question-seed", type=int, default=0)
        p.add_argument("--n-q", type=int, default=1)
        p.add_argument("--question-from", metavar="FRAME:PATCH")

    r = sub.add_parser("run", help="run the pipeline on a stream file")
    r.add_argument("--input", "-i", required=True)
    r.add_argument("--check-oracle", action="store_true")
    r.add_argument("--max-blocks", type=int)
    question_flags(r)
    add_config_flags(r)
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="run an ablation experiment")
    a.add_argument("which", choices=["tau", "pooling", "consensus"])
    a.add_argument("--input", "-i", help="stream file; default is the calibrated needle experiment")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--seeds", type=int, default=10)
    a.add_argument("--taus", type=float, nargs="+", default=[0.25, 0.5, 0.75])
    question_flags(a)
    add_config_flags(a)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("inspect", help="summarize a cold-store directory or record file")
    s.add_argument("path")
    s.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"kvstream {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
