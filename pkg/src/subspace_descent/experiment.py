"""Configured runs, parameter sweeps and the SVD-vs-online-PCA timing bench.

Outputs of a run (all written atomically, so a failed run leaves nothing
behind except an ``*.error.json`` diagnostic on numerical blow-up):

* ``<name>.csv``          one row per step, columns ``trainer.CSV_COLUMNS``
* ``<name>.summary.json`` final metrics, tagged with ``schema_version``
* ``<name>.ckpt.json``    optional checkpoint of the full trainer state
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import problems
from .matrix import NonFiniteError
from .optimizers import OptimizerState, make_kind, init_state, optimizer_step
from .projection import ProjectionState, init_projection, pca_loss_grad
from .svd import svd
from .trainer import (
    CSV_COLUMNS,
    DYNAMIC,
    FULL_RANK,
    MODES,
    SubspaceTrainerState,
    create_trainer,
    lr_schedule,
    train_step,
)

SCHEMA_VERSION = 1
OUTPUT_ENV = "SUBSPACE_DESCENT_OUTPUT_DIR"
UPDATERS = ("online_pca", "periodic_svd", "static")
SWEEP_AXES = ("rank", "alpha", "lambda", "lr")
SPIKE_FACTOR = 10.0


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class ExperimentConfig:
    problem: dict = field(default_factory=lambda: {"name": "quadratic", "n": 32, "m": 16, "seed": 0})
    mode: str = DYNAMIC
    optimizer: dict = field(default_factory=lambda: {"name": "adam"})
    updater: str = "online_pca"
    optimizer_P: dict = field(default_factory=lambda: {"name": "adam"})
    alpha: float = 5.0
    lam: float = 0.1
    svd_period: int = 200
    rank: Optional[int] = None
    base_lr: float = 0.01
    steps: int = 2000
    warmup: float = 0.1
    decay: str = "constant"
    weight_decay_W: float = 0.0
    weight_decay_P: float = 0.0
    max_grad_norm: Optional[float] = 1.0
    seed: int = 0
    name: str = "run"
    output_dir: Optional[str] = None
    checkpoint: bool = False
    # Wall-clock timings make the CSV differ between reruns, so they are opt-in.
    record_timing: bool = False

    def __post_init__(self):
        errors = []
        if not isinstance(self.problem, dict) or "name" not in self.problem:
            errors.append("problem must be an object with a 'name'")
        if self.mode not in MODES:
            errors.append(f"mode must be one of {MODES}")
        if not isinstance(self.optimizer, dict) or "name" not in self.optimizer:
            errors.append("optimizer must be an object with a 'name'")
        if not isinstance(self.optimizer_P, dict) or "name" not in self.optimizer_P:
            errors.append("optimizer_P must be an object with a 'name'")
        if self.updater not in UPDATERS:
            errors.append(f"updater must be one of {UPDATERS}")
        if not _positive(self.alpha):
            errors.append("alpha must be positive")
        if not (_number(self.lam) and self.lam >= 0):
            errors.append("lam must be non-negative")
        if not (isinstance(self.svd_period, int) and self.svd_period >= 1):
            errors.append("svd_period must be a positive integer")
        if self.rank is not None and not (isinstance(self.rank, int) and self.rank >= 1):
            errors.append("rank must be a positive integer or null")
        if not _positive(self.base_lr):
            errors.append("base_lr must be positive")
        if not (isinstance(self.steps, int) and self.steps >= 1):
            errors.append("steps must be a positive integer")
        if not (_number(self.warmup) and 0 <= self.warmup < 1):
            errors.append("warmup must lie in [0, 1)")
        if self.decay not in ("constant", "cosine"):
            errors.append("decay must be 'constant' or 'cosine'")
        for name in ("weight_decay_W", "weight_decay_P"):
            v = getattr(self, name)
            if not (_number(v) and v >= 0):
                errors.append(f"{name} must be non-negative")
        if self.max_grad_norm is not None and not _positive(self.max_grad_norm):
            errors.append("max_grad_norm must be positive or null")
        if not isinstance(self.seed, int):
            errors.append("seed must be an integer")
        if not (isinstance(self.name, str) and self.name and "/" not in self.name):
            errors.append("name must be a non-empty string without '/'")
        if errors:
            raise ConfigError("; ".join(errors))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return ExperimentConfig.from_dict({**self.to_dict(), **kw})


def _number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _positive(x) -> bool:
    return _number(x) and x > 0


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(data)


def output_dir(config: ExperimentConfig, override=None) -> Path:
    """Flag beats environment beats config; default ``./runs``."""
    return Path(override or os.environ.get(OUTPUT_ENV) or config.output_dir or "runs")


# --- running ------------------------------------------------------------------


def build(config: ExperimentConfig):
    """Problem and freshly initialised trainer for a config."""
    try:
        problem = problems.from_spec(config.problem)
        kind = make_kind(**_optimizer_args(config.optimizer))
        kind_P = make_kind(**_optimizer_args(config.optimizer_P))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    steps, lr, warm, decay = config.steps, config.base_lr, config.warmup, config.decay
    st = create_trainer(
        problem.init(config.seed), kind,
        mode=config.mode, rank=config.rank, updater=config.updater, optimizer_P=kind_P,
        lam=config.lam, alpha=config.alpha, svd_period=config.svd_period,
        lr=lambda s: lr_schedule(s, steps, lr, warm, decay),
        weight_decay_W=config.weight_decay_W, weight_decay_P=config.weight_decay_P,
        max_grad_norm=config.max_grad_norm, seed=config.seed,
    )
    return problem, st


def _optimizer_args(d: dict) -> dict:
    d = dict(d)
    return {"name": d.pop("name"), **d}


@dataclass(eq=False)
class RunOutcome:
    config: ExperimentConfig
    records: list
    summary: dict
    state: SubspaceTrainerState


def execute(config: ExperimentConfig) -> RunOutcome:
    """Train in memory; raises TrainingDiverged on non-finite values."""
    problem, st = build(config)
    peak_state = st.state_scalar_count()
    records = []
    t0 = time.perf_counter()
    for _ in range(config.steps):
        try:
            st, rec = train_step(st, problem.grad, problem.loss, timing=config.record_timing)
        except NonFiniteError as exc:
            raise TrainingDiverged(str(exc), _diagnostics(config, st, records, str(exc))) from None
        if not math.isfinite(rec.loss):
            msg = f"loss became non-finite at step {rec.step}"
            raise TrainingDiverged(msg, _diagnostics(config, st, records, msg))
        records.append(rec)
        peak_state = max(peak_state, st.state_scalar_count())
    wall = time.perf_counter() - t0
    summary = make_summary(config, records, peak_state, st.projection_scalar_count(), wall)
    return RunOutcome(config, records, summary, st)


def _diagnostics(config, st, records, message) -> dict:
    last = records[-1] if records else None
    return {
        "schema_version": SCHEMA_VERSION,
        "status": "diverged",
        "message": message,
        "step": st.step,
        "last_loss": None if last is None else last.loss,
        "last_grad_norm": None if last is None else last.grad_norm,
        "min_loss": min((r.loss for r in records), default=None),
        "config": config.to_dict(),
    }


def final_loss(records) -> float:
    tail = [r.loss for r in records[-10:]]
    return float(sum(tail) / len(tail))


def spike_ratio(losses) -> float:
    """max_t loss_t / min_{s<=t} loss_s (1 for a monotone curve)."""
    L = np.asarray(losses, dtype=np.float64)
    run_min = np.minimum.accumulate(L)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(run_min > 0, L / run_min, np.where(L > 0, np.inf, 1.0))
    return float(r.max())


def make_summary(config, records, peak_state, projection_scalars, wall) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "status": "ok",
        "name": config.name,
        "steps": len(records),
        "final_loss": final_loss(records),
        "final_grad_norm": records[-1].grad_norm,
        "min_loss": min(r.loss for r in records),
        "spike_ratio": spike_ratio([r.loss for r in records]),
        "peak_state_scalars": int(peak_state),
        "projection_scalars": int(projection_scalars),
        "wall_time_s": wall,
        "config": config.to_dict(),
    }


def records_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(_fmt(v) for v in r.as_row())
    return buf.getvalue()


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def read_csv(path) -> list:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in rows]


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def run(config: ExperimentConfig, out_dir=None) -> dict:
    """Train, then write CSV, summary and optional checkpoint. Returns the paths."""
    out = output_dir(config, out_dir)
    try:
        outcome = execute(config)
    except TrainingDiverged as exc:
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(out / f"{config.name}.error.json", json.dumps(exc.diagnostics, indent=2))
        raise
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / f"{config.name}.csv", "summary": out / f"{config.name}.summary.json"}
    # Everything is rendered before the first write so a failure cannot leave half the files.
    payload = {paths["csv"]: records_csv(outcome.records),
               paths["summary"]: json.dumps(outcome.summary, indent=2)}
    if config.checkpoint:
        paths["checkpoint"] = out / f"{config.name}.ckpt.json"
        payload[paths["checkpoint"]] = json.dumps(checkpoint_dict(config, outcome.state))
    for p, text in payload.items():
        _atomic_write(p, text)
    return {k: str(v) for k, v in paths.items()}


# --- checkpoints ----------------------------------------------------------------


def checkpoint_dict(config: ExperimentConfig, st: SubspaceTrainerState) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "step": st.step,
        "params": [p.tolist() for p in st.params],
        "opt_states": [s.to_dict() for s in st.opt_states],
        "projections": [None if p is None else p.to_dict() for p in st.projections],
    }


def load_checkpoint(path):
    """Returns ``(config, trainer_state)`` ready to continue training."""
    with open(path) as fh:
        d = json.load(fh)
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported checkpoint schema {d.get('schema_version')!r}")
    config = ExperimentConfig.from_dict(d["config"])
    _, fresh = build(config)
    st = replace(
        fresh,
        params=[np.asarray(p, dtype=np.float64) for p in d["params"]],
        opt_states=[OptimizerState.from_dict(s) for s in d["opt_states"]],
        projections=[None if p is None else ProjectionState.from_dict(p) for p in d["projections"]],
        step=int(d["step"]),
    )
    return config, st


# --- sweeps ---------------------------------------------------------------------

SWEEP_COLUMNS = ("axis", "value", "seed", "status", "final_loss", "final_grad_norm", "min_loss",
                 "spike_ratio", "unstable", "peak_state_scalars", "wall_time_s", "message")


def _apply_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "rank":
        if value in ("full", None):
            return replace(config, mode=FULL_RANK, rank=None)
        return replace(config, rank=int(value))
    key = {"alpha": "alpha", "lambda": "lam", "lr": "base_lr"}[axis]
    return replace(config, **{key: float(value)})


@dataclass(eq=False)
class SweepResult:
    axis: str
    rows: list
    medians: dict
    trend: Optional[dict] = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in SWEEP_COLUMNS})
        return buf.getvalue()


def rank_trend(medians: dict, tolerance: float = 0.05) -> dict:
    """Check medians are non-increasing as rank grows (``full`` last), up to a relative tolerance."""
    order = sorted(medians, key=lambda v: math.inf if v == "full" else int(v))
    vals = [medians[v] for v in order]
    ok = all(b <= a * (1 + tolerance) for a, b in zip(vals, vals[1:]))
    return {"order": [str(v) for v in order], "medians": vals, "non_increasing": ok, "tolerance": tolerance}


def sweep(config: ExperimentConfig, axis: str, values, seeds=None) -> SweepResult:
    """One run per (value, seed). Failures are recorded and the sweep carries on."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    seeds = [config.seed] if seeds is None else list(seeds)
    rows = []
    for value in values:
        for seed in seeds:
            row = {"axis": axis, "value": value, "seed": seed}
            try:
                cfg = _apply_axis(replace(config, seed=seed), axis, value)
                s = execute(cfg).summary
                row.update(status="ok", message=None, unstable=s["spike_ratio"] > SPIKE_FACTOR,
                           **{k: s[k] for k in ("final_loss", "final_grad_norm", "min_loss", "spike_ratio",
                                                "peak_state_scalars", "wall_time_s")})
            except TrainingDiverged as exc:
                row.update(status="diverged", unstable=True, message=str(exc))
            except (ConfigError, ValueError) as exc:
                row.update(status="error", unstable=None, message=str(exc))
            rows.append(row)
    medians = {}
    for value in values:
        ok = [r["final_loss"] for r in rows if r["value"] == value and r["status"] == "ok"]
        medians[value] = statistics.median(ok) if ok else math.nan
    trend = rank_trend(medians) if axis == "rank" else None
    return SweepResult(axis, rows, medians, trend)


def write_sweep(result: SweepResult, out: Path, name: str) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{name}.sweep_{result.axis}.csv"
    json_path = out / f"{name}.sweep_{result.axis}.json"
    summary = {"schema_version": SCHEMA_VERSION, "axis": result.axis,
               "medians": {str(k): v for k, v in result.medians.items()}, "trend": result.trend,
               "failures": sum(r["status"] != "ok" for r in result.rows)}
    _atomic_write(csv_path, result.to_csv())
    _atomic_write(json_path, json.dumps(summary, indent=2))
    return {"csv": str(csv_path), "summary": str(json_path)}


# --- timing bench ---------------------------------------------------------------

BENCH_COLUMNS = ("n", "m", "k", "repeats", "svd_ms", "pca_ms", "ratio")


def _median_ms(fn, repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1000.0 * statistics.median(times)


def timing_bench(shapes, repeats: int = 20, warmup: int = 3, svd_method: str = "lapack",
                 seed: int = 0, lam: float = 0.1, alpha: float = 5.0, lr: float = 1e-3) -> list:
    """Median wall time of a full SVD vs one online-PCA step, per (n, m, k)."""
    if repeats < 1:
        raise ValueError("repeats must be positive")
    rows = []
    for n, m, k in shapes:
        if max(n, m) > 4096:
            raise ValueError("bench shapes are limited to 4096 per side")
        rng = np.random.default_rng(seed)
        G = rng.standard_normal((n, m))
        P = init_projection(n, k, seed)
        state = init_state(make_kind("adam"), P.shape)

        def pca_step():
            delta, _ = optimizer_step(state, pca_loss_grad(P, G, lam))
            return P + alpha * lr * delta

        svd_ms = _median_ms(lambda: svd(G, method=svd_method), repeats, warmup)
        pca_ms = _median_ms(pca_step, repeats, warmup)
        rows.append({"n": n, "m": m, "k": k, "repeats": repeats, "svd_ms": svd_ms, "pca_ms": pca_ms,
                     "ratio": svd_ms / pca_ms})
    return rows


def bench_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
