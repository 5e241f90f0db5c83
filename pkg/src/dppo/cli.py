"""Command-line entry point.

Exit codes: 0 success, 1 validation or usage error, 2 runtime fault.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .mapping import ElevationMap, scan_into_map_batch
from .net import CheckpointError
from .plot import emit_plot
from .terrain import (ConfigError, Heightmap, TerrainKind, TerrainSpec, export_heightmap_csv,
                      generate_heightmap, height_at)
from .trainer import DivergenceError, evaluate_checkpoint, train_student, train_teacher, validate_run

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dppo", description="Teacher/student biped locomotion training and evaluation.",
                epilog="Set DPPO_THREADS to cap the BLAS/OpenMP thread pools.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train-teacher", help="stage 1: PPO with clean perception")
    t.add_argument("--config", required=True, metavar="F", help="run config file")
    t.add_argument("--out", default="runs/teacher", metavar="DIR",
                   help="output directory for checkpoints, metrics.csv and manifest.txt (default: runs/teacher)")

    s = sub.add_parser("train-student", help="stage 2: combined distillation and PPO with noisy perception")
    s.add_argument("--config", required=True, metavar="F", help="run config file")
    s.add_argument("--teacher", required=True, metavar="CKPT", help="teacher policy checkpoint")
    s.add_argument("--out", default="runs/student", metavar="DIR",
                   help="output directory (default: runs/student)")

    e = sub.add_parser("eval", help="evaluate a policy checkpoint over a terrain/noise suite")
    e.add_argument("--ckpt", required=True, metavar="C", help="policy checkpoint")
    e.add_argument("--suite", required=True, metavar="F",
                   help="config file whose [eval] section lists terrain kinds, noise levels, episodes and seeds")
    e.add_argument("--out", default="runs/eval", metavar="DIR",
                   help="output directory for eval.csv and eval_summary.txt (default: runs/eval)")

    m = sub.add_parser("map-demo", help="fuse synthetic depth scans of one terrain into an elevation map")
    m.add_argument("--terrain", required=True, metavar="K", choices=[k.value for k in TerrainKind],
                   help="terrain kind: " + ", ".join(k.value for k in TerrainKind))
    m.add_argument("--seed", required=True, type=int, metavar="N", help="terrain and sensor seed")
    m.add_argument("--config", default=None, metavar="F",
                   help="optional run config supplying [terrain], [env] and [mapping] settings")
    m.add_argument("--scans", type=int, default=30, metavar="N", help="number of scans along the walk (default: 30)")
    m.add_argument("--out", default="runs/map-demo", metavar="DIR", help="output directory (default: runs/map-demo)")

    pl = sub.add_parser("plot", help="render metrics CSV columns as an SVG line chart")
    pl.add_argument("--metrics", required=True, metavar="CSV", help="metrics CSV with a header row")
    pl.add_argument("--out", required=True, metavar="SVG", help="output SVG path")
    pl.add_argument("--columns", default="mean_return", metavar="A,B",
                    help="comma-separated column names (default: mean_return)")
    return p


def _load_config(path) -> config_mod.RunConfig:
    try:
        return config_mod.load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None


def _require_file(path, what):
    if not Path(path).is_file():
        raise ConfigError(f"{what} not found: {path}")


def _cmd_train_teacher(args) -> None:
    run = _load_config(args.config)
    validate_run(run)
    res = train_teacher(run, args.out)
    print(f"teacher checkpoint: {res.policy_path}")


def _cmd_train_student(args) -> None:
    run = _load_config(args.config)
    validate_run(run)
    _require_file(args.teacher, "teacher checkpoint")
    res = train_student(run, args.teacher, args.out)
    print(f"student checkpoint: {res.policy_path}")


def _cmd_eval(args) -> None:
    run = _load_config(args.suite)
    _require_file(args.ckpt, "checkpoint")
    report = evaluate_checkpoint(args.ckpt, run, args.out)
    sys.stdout.write(report.summary())


def map_demo(kind: str, seed: int, run: config_mod.RunConfig, out_dir, scans: int = 30) -> ElevationMap:
    """Walk straight across one terrain, scanning at even spacing, and write
    the true heightmap plus the fused map's height, variance and coverage."""
    if scans < 1:
        raise ConfigError("--scans must be >= 1")
    t, env, m = run.terrain, run.env, run.mapping
    truth = generate_heightmap(TerrainSpec(TerrainKind(kind), t.params(), seed, t.geometry()))
    emap = ElevationMap.empty(m.geometry(), m.prior_height, m.prior_var, batch=1)
    rngs = [np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])]
    sensor = m.sensor()
    for x in np.linspace(env.start_x, env.start_x + 3.0, scans):
        z = float(height_at(truth, x, env.start_y)) + env.nominal_height
        scan_into_map_batch(emap, truth.heights[None], t.geometry(), np.array([x]), np.array([env.start_y]),
                            np.array([z]), np.array([0.0]), sensor, rngs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = m.geometry()
    export_heightmap_csv(truth, out / "heightmap.csv")
    export_heightmap_csv(Heightmap(emap.h[0], g.resolution, g.origin), out / "map_height.csv")
    export_heightmap_csv(Heightmap(emap.var[0], g.resolution, g.origin), out / "map_var.csv")
    export_heightmap_csv(Heightmap(emap.observed[0].astype(np.float64), g.resolution, g.origin),
                         out / "map_observed.csv")
    return emap


def _cmd_map_demo(args) -> None:
    run = _load_config(args.config) if args.config else config_mod.RunConfig()
    emap = map_demo(args.terrain, args.seed, run, args.out, args.scans)
    print(f"observed cells: {int(emap.observed.sum())} of {emap.observed.size}; outputs in {args.out}")


def _cmd_plot(args) -> None:
    cols = [c.strip() for c in args.columns.split(",") if c.strip()]
    _require_file(args.metrics, "metrics CSV")
    emit_plot(args.metrics, cols, args.out)


COMMANDS = {"train-teacher": _cmd_train_teacher, "train-student": _cmd_train_student, "eval": _cmd_eval,
            "map-demo": _cmd_map_demo, "plot": _cmd_plot}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args)
    except (ConfigError, CheckpointError) as exc:
        print(f"dppo: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DivergenceError, RuntimeError, FloatingPointError, OSError) as exc:
        print(f"dppo: runtime fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
