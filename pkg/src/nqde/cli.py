"""Command-line entry point: ``nqde {gen-data,train,reproduce,check}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .model import Variant, collapse_g1, integrate
from .paths import fit_natural_cubic, generate_spirals, write_dataset_csv
from .solvers import SolverConfig
from .training import (
    DEFAULT_LR,
    SUMMARY_COLUMNS,
    RunReport,
    TrainConfig,
    Trainer,
    aggregate,
    run_experiment,
)

log = logging.getLogger("nqde")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--solver", choices=["rk4", "dopri5"], default="dopri5")
    p.add_argument("--rtol", type=_positive_float, default=1e-4)
    p.add_argument("--atol", type=_positive_float, default=1e-6)
    p.add_argument("--step", type=_positive_float, default=0.05, help="rk4 step size")
    p.add_argument("--knot-stops", action="store_true",
                   help="never let a dopri5 step straddle a spline knot")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=_positive_int, default=20)
    p.add_argument("--batch", type=_positive_int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="summary CSV; a .json sidecar is written next to it")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    _add_solver_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nqde", description="Neural quantum CDEs on the spiral task.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a spiral dataset as CSV")
    g.add_argument("--n", type=_positive_int, default=128)
    g.add_argument("--steps", type=_positive_int, default=100)
    g.add_argument("--sigma", type=float, default=0.02)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--model", choices=[v.value for v in Variant], required=True)
    t.add_argument("--lr", type=_positive_float, default=None,
                   help="default 0.002 for *_unn, 0.001 for *_geo")
    t.add_argument("--trace", type=Path, default=None,
                   help="per-epoch CSV here plus a hidden-state trajectory CSV beside it")
    _add_run_flags(t)

    r = sub.add_parser("reproduce", help="all four models over several seeds")
    r.add_argument("--repeats", type=_positive_int, default=3)
    _add_run_flags(r)

    c = sub.add_parser("check", help="run the numerical verification suites")
    c.add_argument("--seed", type=int, default=0)
    return parser


def _solver(args) -> SolverConfig:
    return SolverConfig(method=args.solver, step=args.step, rtol=args.rtol, atol=args.atol,
                        knot_stops=args.knot_stops)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_summary(rows: list[dict], out: Path) -> None:
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])


def write_sidecar(reports: Sequence[RunReport], configs: Sequence[TrainConfig], out: Path) -> Path:
    runs = []
    for r in reports:
        d = r.to_dict()
        d.pop("wall_time")
        runs.append(d)
    doc = {
        "nfe_window": "forward/backward NFE summed over the iterations of the final epoch",
        "final_loss": "mean train loss over the final epoch",
        "configs": [c.to_dict() for c in configs],
        "runs": runs,
        "metadata": {
            "version": __version__,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "wall_time_s": {f"{r.model}/seed{r.seed}": r.wall_time for r in reports},
        },
    }
    path = out.with_suffix(".json")
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def _figure_path(out: Path, suffix: str) -> Path:
    return out.with_name(f"{out.stem}{suffix}.png")


def _cmd_gen_data(args) -> int:
    data = generate_spirals(args.n, args.steps, args.sigma, args.seed)
    write_dataset_csv(data, args.out)
    print(f"wrote {len(data)} spirals to {args.out}")
    return EXIT_OK


def _write_trace(trainer: Trainer, trace: Path, figures: bool) -> None:
    with open(trace, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "acc_train", "fwd_nfe", "bwd_nfe"])
        for e in trainer.history:
            w.writerow([e.epoch, _fmt(e.loss), _fmt(e.accuracy_train), e.forward_nfe, e.backward_nfe])
    labels = trainer.test_set.labels
    picks = [int(np.flatnonzero(labels == c)[0]) for c in (0, 1)]
    rows = []
    for sid in picks:
        path = fit_natural_cubic(trainer.test_set.series[sid])
        sol = integrate(trainer.params, path, trainer.config.solver, trajectory=True)
        rows.extend((sid, int(labels[sid]), t, z) for t, z in zip(sol.times, sol.states))
    traj = trace.with_name(f"{trace.stem}_trajectory.csv")
    with open(traj, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", "t", "re_psi1", "im_psi1", "re_psi2", "im_psi2", "p1", "p2"])
        for sid, label, t, z in rows:
            p = collapse_g1(z)
            w.writerow([sid, label, _fmt(t)] + [_fmt(v) for v in z] + [_fmt(v) for v in p])
    if figures:
        from .plotting import state_trajectories

        state_trajectories(rows, _figure_path(traj, ""))


def _cmd_train(args) -> int:
    config = TrainConfig(args.model, epochs=args.epochs, lr=args.lr, batch_size=args.batch,
                         solver=_solver(args), seed=args.seed)
    start = time.perf_counter()
    trainer = Trainer(config)
    try:
        for _ in range(config.epochs):
            trainer.train_epoch()
        report = trainer.report(time.perf_counter() - start)
    except ArithmeticError as exc:
        print(f"training failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    write_summary(aggregate([report]), args.out)
    write_sidecar([report], [config], args.out)
    if not args.no_figures:
        from .plotting import training_curves

        training_curves([report.to_dict()], _figure_path(args.out, ""))
    if args.trace is not None:
        _write_trace(trainer, args.trace, not args.no_figures)
    print(f"{report.model} seed={report.seed}: loss={report.final_loss:.5g} "
          f"acc_train={report.accuracy_train:.3f} acc_test={report.accuracy_test:.3f} "
          f"nfe={report.forward_nfe}/{report.backward_nfe}")
    return EXIT_OK


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("NQDE_THREADS", "1")))
    except ValueError:
        return 1


def _cmd_reproduce(args) -> int:
    configs = [
        TrainConfig(v, epochs=args.epochs, lr=DEFAULT_LR[v], batch_size=args.batch,
                    solver=_solver(args), seed=args.seed + k)
        for v in Variant
        for k in range(args.repeats)
    ]
    workers = _threads()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run_experiment, configs))
    else:
        reports = [run_experiment(c) for c in configs]
    reports.sort(key=lambda r: (r.model, r.seed))
    rows = aggregate(reports)
    write_summary(rows, args.out)
    write_sidecar(reports, configs, args.out)
    if not args.no_figures:
        from .plotting import training_curves

        training_curves([r.to_dict() for r in reports], _figure_path(args.out, "_curves"))
    print("nfe window: final epoch, summed over its iterations; loss: final-epoch train mean")
    print(",".join(SUMMARY_COLUMNS))
    for row in rows:
        print(",".join(f"{row[c]:.6g}" if c != "model" else row[c] for c in SUMMARY_COLUMNS))
    failed = [f"{r.model}/seed{r.seed}: {r.diagnostics}" for r in reports if r.failed]
    for f in failed:
        print(f"FAILED {f}", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


def _cmd_check(args) -> int:
    from .checks import run_all

    results = run_all(args.seed)
    for r in results:
        print(r.line())
    bad = sum(not r.passed for r in results)
    print(f"{len(results) - bad}/{len(results)} checks passed")
    return EXIT_FAIL if bad else EXIT_OK


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "reproduce": _cmd_reproduce,
    "check": _cmd_check,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
