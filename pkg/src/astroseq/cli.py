"""Command-line entry points.

``astroseq <command> [--config run.ini] [--seed N] [--out-dir DIR] ...``

Commands:

* ``simulate``   integrate the dynamical system, write level traces
* ``retention``  derive a memory-retention schedule from the system
* ``gradcheck``  compare replay gradients against full backprop
* ``train``      train a segment model per the run config
* ``bench``      time the attention block and both gradient algorithms
* ``eval``       score a saved checkpoint on fresh validation data

Exit codes: 0 success, 2 usage or configuration error, 3 numerical
failure (overflow, degenerate schedule, aborted training, or a failed
gradient check).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config
from .errors import NUMERICAL_ERRORS, USAGE_ERRORS
from .harness import (
    bench_attention,
    bench_rollouts,
    eval_run,
    resolve_schedule,
    train_run,
)
from .neuroglia import DriveSpec, build_geometry, coupling_tensor, initial_state, run_stp_cycles
from .retention import uniform_schedule
from .trainer import amrb_rollout, bptt_rollout, classification_loss
from .model import SegmentModel

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


def _common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="run config file (INI); defaults apply if omitted")
    sub.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    sub.add_argument("--out-dir", help="directory for artifacts; created if missing")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="astroseq",
        description="Neuron-astrocyte simulation, linear attention, replay training.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    sim = commands.add_parser("simulate", help="integrate stimulation cycles")
    _common(sim)
    sim.add_argument("--cycles", type=int, help="cycle count (default: n_segments)")
    sim.set_defaults(handler=cmd_simulate)

    ret = commands.add_parser("retention", help="derive a retention schedule")
    _common(ret)
    ret.set_defaults(handler=cmd_retention)

    grad = commands.add_parser("gradcheck", help="replay vs full-backprop gradients")
    _common(grad)
    grad.add_argument(
        "--tolerance", type=float, default=1e-8,
        help="max allowed relative discrepancy (default 1e-8)",
    )
    grad.set_defaults(handler=cmd_gradcheck)

    train = commands.add_parser("train", help="train a segment model")
    _common(train)
    train.set_defaults(handler=cmd_train)

    bench = commands.add_parser("bench", help="attention and rollout timings")
    _common(bench)
    bench.add_argument(
        "--sizes", default="128,256,512,1024",
        help="comma-separated token counts for the attention timing",
    )
    bench.add_argument("--repeats", type=int, default=5, help="best-of repetitions")
    bench.set_defaults(handler=cmd_bench)

    ev = commands.add_parser("eval", help="score a checkpoint")
    _common(ev)
    ev.add_argument("--checkpoint", required=True, help="checkpoint file to load")
    ev.set_defaults(handler=cmd_eval)

    return parser


def _load_config(args) -> RunConfig:
    if args.config is None:
        return RunConfig()
    return load_run_config(args.config)


def _out_dir(args) -> Path | None:
    if args.out_dir is None:
        return None
    path = Path(args.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _emit(payload: dict, out_dir: Path | None, filename: str) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if out_dir is not None:
        (out_dir / filename).write_text(text + "\n")


# ---------------------------------------------------------------------------
# command handlers


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out_dir = _out_dir(args)
    params, extras = cfg.sim_params()
    n_cycles = args.cycles if args.cycles is not None else cfg.n_segments
    geometry = build_geometry(extras["n_neurons"], extras["spacing"])
    coupling = coupling_tensor(geometry, extras["scale"])
    drive = DriveSpec(rate_hz=extras["drive_hz"])
    initial = initial_state(geometry.n_neurons, params, stp=extras["init_stp"])
    trace = run_stp_cycles(
        params, coupling, n_cycles, extras["cycle_seconds"], drive, initial=initial
    )
    boundaries = {
        "cycle_ends": [int(i) for i in trace.cycle_ends],
        "times": [float(trace.times[i]) for i in trace.cycle_ends],
        "ltp_levels": [float(trace.ltp[i].mean()) for i in trace.cycle_ends],
    }
    if out_dir is not None:
        lines = ["time,fac_mean,stp_mean,ltp_mean"]
        for i in range(len(trace.times)):
            lines.append(
                f"{trace.times[i]:.6f},{trace.fac[i].mean():.9f},"
                f"{trace.stp[i].mean():.9f},{trace.ltp[i].mean():.9f}"
            )
        (out_dir / "trace.csv").write_text("\n".join(lines) + "\n")
        (out_dir / "boundaries.json").write_text(
            json.dumps(boundaries, indent=2) + "\n"
        )
    print(
        f"simulated {n_cycles} cycles of {extras['cycle_seconds']}s "
        f"({len(trace.times)} samples, {geometry.n_neurons} neurons)"
    )
    print(f"slow-level means at cycle ends: {boundaries['ltp_levels']}")
    return EXIT_OK


def cmd_retention(args) -> int:
    cfg = _load_config(args)
    out_dir = _out_dir(args)
    cache = out_dir / "retention_cache" if out_dir is not None else None
    schedule = resolve_schedule(cfg, cache)
    payload = json.loads(schedule.to_json())
    _emit(payload, out_dir, "retention.json")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    out_dir = _out_dir(args)
    task = cfg.build_task()
    spec = task.spec
    model = SegmentModel(cfg.model_config(spec.vocab_size, spec.n_classes), seed=args.seed)
    batch = task.dataset(1, args.seed)[0]
    schedule = resolve_schedule(cfg)

    model.zero_grads()
    rep_bptt = bptt_rollout(model, batch, schedule, classification_loss(model, batch, cfg.loss_mode))
    g_bptt = {name: p.grad.copy() for name, p in model.params.items()}
    model.zero_grads()
    rep_amrb = amrb_rollout(model, batch, schedule, classification_loss(model, batch, cfg.loss_mode))

    worst = 0.0
    for name, p in model.params.items():
        ref = g_bptt[name]
        if ref.size == 0:
            continue
        denom = max(1.0, float(np.abs(ref).max()))
        worst = max(worst, float(np.abs(p.grad - ref).max()) / denom)
    payload = {
        "max_rel_discrepancy": worst,
        "tolerance": args.tolerance,
        "n_segments": spec.n_segments,
        "memory": {
            "amrb": rep_amrb.memory_report(),
            "bptt": rep_bptt.memory_report(),
        },
    }
    _emit(payload, out_dir, "gradcheck.json")
    if not (worst <= args.tolerance):
        print(
            f"gradient check FAILED: {worst:.3e} exceeds {args.tolerance:.3e}",
            file=sys.stderr,
        )
        return EXIT_NUMERICAL
    print(f"gradient check passed: {worst:.3e} <= {args.tolerance:.3e}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    record = train_run(cfg, seed=args.seed, out_dir=args.out_dir)
    final = record["final"]
    print(
        f"trained {final['epochs_run']} epochs on {record['task']['name']}: "
        f"val_acc={final['val_acc']:.4f} (best {final['best_val_acc']:.4f})"
    )
    if args.out_dir is not None:
        print(f"artifacts in {args.out_dir}: run.json curve.csv model.ckpt")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    out_dir = _out_dir(args)
    try:
        sizes = tuple(int(s) for s in args.sizes.split(",") if s.strip())
    except ValueError:
        print(f"--sizes must be comma-separated integers, got {args.sizes!r}", file=sys.stderr)
        return EXIT_USAGE
    if not sizes:
        print("--sizes must name at least one token count", file=sys.stderr)
        return EXIT_USAGE
    payload = {
        "attention": bench_attention(sizes=sizes, repeats=args.repeats, seed=args.seed),
        "rollouts": bench_rollouts(cfg, seed=args.seed),
    }
    _emit(payload, out_dir, "bench.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out_dir = _out_dir(args)
    record = eval_run(args.checkpoint, cfg, seed=args.seed)
    _emit(record, out_dir, "eval.json")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
