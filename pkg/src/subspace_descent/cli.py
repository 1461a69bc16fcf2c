"""Command-line front end: ``run``, ``sweep``, ``bench`` and ``verify``.

Exit codes: 0 success, 2 invalid config or arguments, 3 numerical blow-up,
otherwise whatever pytest returns for ``verify``.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from pathlib import Path

from .experiment import (
    OUTPUT_ENV,
    SWEEP_AXES,
    ConfigError,
    ExperimentConfig,
    TrainingDiverged,
    _atomic_write,
    bench_csv,
    load_config,
    output_dir,
    run,
    sweep,
    timing_bench,
    write_sweep,
)

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="JSON config file (defaults are used when omitted)")
    p.add_argument("--output-dir", help=f"where outputs go (else ${OUTPUT_ENV}, else config, else ./runs)")
    p.add_argument("--name")
    p.add_argument("--mode", choices=["FullRank", "StaticSubspace", "Dynamic"])
    p.add_argument("--updater", choices=["online_pca", "periodic_svd", "static"])
    p.add_argument("--optimizer", help="base optimizer for W: gd, momentum, adam, lion")
    p.add_argument("--rank", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lam", "--lambda", dest="lam", type=float)
    p.add_argument("--svd-period", dest="svd_period", type=int)
    p.add_argument("--lr", dest="base_lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--warmup", type=float)
    p.add_argument("--decay", choices=["constant", "cosine"])
    p.add_argument("--max-grad-norm", dest="max_grad_norm", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", action="store_true", default=None)
    p.add_argument("--timing", dest="record_timing", action="store_true", default=None,
                   help="record wall_ms_pupdate (makes reruns differ byte-wise)")


def _config_from_args(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    over = {k: getattr(args, k) for k in ("name", "mode", "updater", "rank", "alpha", "lam", "svd_period",
                                          "base_lr", "steps", "warmup", "decay", "max_grad_norm", "seed",
                                          "checkpoint", "record_timing")}
    if args.optimizer:
        over["optimizer"] = {"name": args.optimizer}
    return config.with_overrides(**over)


def _parse_value(axis: str, text: str):
    if axis == "rank":
        return "full" if text == "full" else int(text)
    return float(text)


def cmd_run(args) -> int:
    config = _config_from_args(args)
    paths = run(config, args.output_dir)
    print(json.dumps(paths))
    return 0


def cmd_sweep(args) -> int:
    config = _config_from_args(args)
    try:
        values = [_parse_value(args.axis, v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad sweep value: {exc}") from None
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    result = sweep(config, args.axis, values, seeds)
    paths = write_sweep(result, output_dir(config, args.output_dir), config.name)
    for value, med in result.medians.items():
        print(f"{args.axis}={value}: median final loss {med:.6g}")
    if result.trend is not None:
        print(f"non-increasing in rank: {result.trend['non_increasing']}")
    print(json.dumps(paths))
    return 0


def cmd_bench(args) -> int:
    shapes = []
    for item in args.shapes.split(";"):
        try:
            n, m, k = (int(x) for x in item.split(","))
        except ValueError:
            raise ConfigError(f"shape {item!r} is not n,m,k") from None
        shapes.append((n, m, k))
    rows = timing_bench(shapes, repeats=args.repeats, svd_method=args.svd_method)
    text = bench_csv(rows)
    sys.stdout.write(text)
    if args.output_dir or args.save:
        out = Path(args.output_dir) if args.output_dir else output_dir(ExperimentConfig())
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(out / "bench.csv", text)
    return 0


def cmd_verify(args) -> int:
    tests = Path(args.tests) if args.tests else Path(__file__).resolve().parents[2] / "tests"
    if not tests.is_dir():
        print(f"test directory {tests} not found", file=sys.stderr)
        return EXIT_CONFIG
    cmd = [sys.executable, "-m", "pytest", str(tests)] + (["-q"] if args.quiet else ["-v"])
    return subprocess.call(cmd)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subspace-descent", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration")
    _add_overrides(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="train one run per value of an axis")
    _add_overrides(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma separated; 'full' allowed for rank")
    p.add_argument("--seeds", help="comma separated seeds (default: the config seed)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="time a full SVD against one online-PCA step")
    p.add_argument("--shapes", default="8,8,2", help="n,m,k triples separated by ';'")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--svd-method", choices=["lapack", "jacobi"], default="lapack")
    p.add_argument("--output-dir")
    p.add_argument("--save", action="store_true", help="also write bench.csv to the output dir")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run the property and acceptance test suite")
    p.add_argument("--tests", help="test directory (default: the package's tests/)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, indent=2), file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
