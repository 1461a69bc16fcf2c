"""Subspace descent: a base optimizer run on projected gradients.

Each step, for every 2-D parameter W with projection P::

    G = grad L(W)
    (delta, S) = optimizer_step(S, P^T G)          # S lives in k x m
    W <- W + lr * (P delta - weight_decay_W * W)
    P <- projection update using the same G

1-D parameters (biases) and every parameter in ``FullRank`` mode skip the
projection. ``StaticSubspace`` keeps P fixed forever.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import partial
from typing import Callable, Optional

import numpy as np

from .hamiltonian import discrete_state_term
from .matrix import NonFiniteError, ShapeError
from .optimizers import OptimizerKind, OptimizerState, adam, init_state, optimizer_step
from .projection import (
    OnlinePCA,
    PeriodicSVD,
    ProjectionState,
    Static,
    init_projection,
    online_pca_state,
    orthodefect,
    update_projection,
)

FULL_RANK = "FullRank"
STATIC = "StaticSubspace"
DYNAMIC = "Dynamic"
MODES = (FULL_RANK, STATIC, DYNAMIC)

CSV_COLUMNS = ("step", "loss", "grad_norm", "hamiltonian", "orthodefect_P", "lr", "wall_ms_pupdate")


@dataclass(frozen=True)
class TrajectoryRecord:
    step: int
    loss: float
    grad_norm: float
    hamiltonian: float
    orthodefect_P: float
    lr: float
    wall_ms_pupdate: float

    def as_row(self) -> tuple:
        return tuple(getattr(self, c) for c in CSV_COLUMNS)


def grad_clip(G, max_norm: float) -> np.ndarray:
    """Scale G by min(1, max_norm / ||G||)."""
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    G = np.asarray(G, dtype=np.float64)
    norm = np.linalg.norm(G)
    if norm <= max_norm:
        return G
    return G * (max_norm / norm)


def clip_global(grads, max_norm: float):
    """Clip a list of gradients by their joint Frobenius norm."""
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm <= max_norm:
        return list(grads)
    factor = max_norm / norm
    return [g * factor for g in grads]


def lr_schedule(step: int, total: int, base_lr: float, warmup_frac: float = 0.1,
                decay: str = "constant", min_ratio: float = 0.0) -> float:
    """Linear warmup from 0 over ``warmup_frac * total`` steps, then constant or cosine."""
    if not 0.0 <= warmup_frac < 1.0:
        raise ValueError("warmup_frac must lie in [0, 1)")
    warm = warmup_frac * total
    if step < warm:
        return base_lr * step / warm
    if decay == "constant":
        return base_lr
    if decay != "cosine":
        raise ValueError(f"unknown decay {decay!r}")
    span = max(total - warm, 1.0)
    frac = min(max((step - warm) / span, 0.0), 1.0)
    return base_lr * (min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


def constant_lr(lr: float) -> Callable[[int], float]:
    return lambda step: lr


@dataclass(frozen=True, eq=False)
class SubspaceTrainerState:
    params: list
    opt_states: list
    projections: list          # ProjectionState or None per parameter
    lr: Callable[[int], float]
    mode: str = DYNAMIC
    weight_decay_W: float = 0.0
    weight_decay_P: float = 0.0
    max_grad_norm: Optional[float] = None
    step: int = 0

    @property
    def W(self) -> np.ndarray:
        return self.params[0]

    @property
    def P(self) -> Optional[np.ndarray]:
        ps = self.projections[0]
        return None if ps is None else ps.P

    def state_scalar_count(self) -> int:
        """Scalars in the weight optimizer's buffers (the projected S)."""
        return sum(s.num_scalars() for s in self.opt_states)

    def projection_scalar_count(self) -> int:
        return sum(p.num_scalars() for p in self.projections if p is not None)


def _projectable(shape) -> bool:
    return len(shape) == 2


def create_trainer(
    params,
    kind: OptimizerKind,
    *,
    mode: str = DYNAMIC,
    rank: Optional[int] = None,
    updater: str = "online_pca",
    optimizer_P: Optional[OptimizerKind] = None,
    lam: float = 0.1,
    alpha: float = 5.0,
    svd_period: int = 200,
    lr: Callable[[int], float] | float = 1e-3,
    weight_decay_W: float = 0.0,
    weight_decay_P: float = 0.0,
    max_grad_norm: Optional[float] = None,
    seed: int = 0,
    P_init: Optional[list] = None,
) -> SubspaceTrainerState:
    """Set up per-parameter optimizer and projection state.

    ``rank=None`` means full rank (k = n). Each 2-D parameter gets
    ``k = min(rank, n)``; ``P_init`` may supply the starting projections.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if updater not in ("online_pca", "periodic_svd", "static"):
        raise ValueError(f"unknown projection updater {updater!r}")
    if mode == STATIC:
        updater = "static"
    schedule = constant_lr(lr) if isinstance(lr, (int, float)) else lr
    params = [np.array(p, dtype=np.float64, copy=True) for p in params]
    opt_states, projections = [], []
    for i, W in enumerate(params):
        if mode == FULL_RANK or not _projectable(W.shape):
            opt_states.append(init_state(kind, W.shape))
            projections.append(None)
            continue
        n, m = W.shape
        k = n if rank is None else min(rank, n)
        if k < 1:
            raise ValueError("rank must be positive")
        P0 = init_projection(n, k, seed * 1009 + i) if P_init is None else np.array(P_init[i], dtype=np.float64)
        if P0.shape != (n, k):
            raise ShapeError(f"initial P for parameter {i} has shape {P0.shape}, expected {(n, k)}")
        if updater == "online_pca":
            ps = online_pca_state(P0, optimizer_P or adam(), lam=lam, alpha=alpha)
        elif updater == "periodic_svd":
            ps = ProjectionState(P0, PeriodicSVD(svd_period))
        else:
            ps = ProjectionState(P0, Static())
        opt_states.append(init_state(kind, (k, m)))
        projections.append(ps)
    return SubspaceTrainerState(params, opt_states, projections, schedule, mode,
                                weight_decay_W, weight_decay_P, max_grad_norm, 0)


_POOL: Optional[ThreadPoolExecutor] = None


def _pool() -> ThreadPoolExecutor:
    global _POOL
    if _POOL is None:
        _POOL = ThreadPoolExecutor(max_workers=2, thread_name_prefix="p-update")
    return _POOL


def train_step(
    st: SubspaceTrainerState,
    grad_fn: Callable,
    loss_fn: Optional[Callable] = None,
    *,
    timing: bool = True,
    parallel: bool = False,
):
    """Advance one iteration. Returns ``(new_state, TrajectoryRecord)``.

    ``grad_fn(params)`` must return one gradient per parameter. With
    ``parallel=True`` online-PCA updates run on a worker thread while the
    weights move; both read only P_t and G_t, so results are identical to
    the sequential order.
    """
    params = st.params
    grads = [np.asarray(g, dtype=np.float64) for g in grad_fn(params)]
    if len(grads) != len(params):
        raise ShapeError(f"grad_fn returned {len(grads)} gradients for {len(params)} parameters")
    for i, (g, W) in enumerate(zip(grads, params)):
        if g.shape != W.shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, parameter is {W.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient {i} is not finite at step {st.step}")
    loss = float(loss_fn(params)) if loss_fn is not None else float("nan")
    grad_norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if st.max_grad_norm is not None:
        grads = clip_global(grads, st.max_grad_norm)
    lr = float(st.lr(st.step))

    hamiltonian = loss + sum(discrete_state_term(s, lr) for s in st.opt_states)
    defects = [orthodefect(p.P) for p in st.projections if p is not None]
    defect = max(defects) if defects else 0.0

    wall = 0.0
    projections = list(st.projections)

    # The SVD rule refreshes P from G at the start of every period, before P is used.
    for i, ps in enumerate(projections):
        if ps is not None and isinstance(ps.updater, PeriodicSVD):
            t0 = time.perf_counter() if timing else 0.0
            projections[i] = update_projection(ps, grads[i], lr, st.weight_decay_P)
            if timing:
                wall += time.perf_counter() - t0

    online = [i for i, ps in enumerate(projections) if ps is not None and isinstance(ps.updater, OnlinePCA)]
    futures = {}
    if parallel and online:
        t0 = time.perf_counter() if timing else 0.0
        for i in online:
            futures[i] = _pool().submit(update_projection, projections[i], grads[i], lr, st.weight_decay_P)

    new_params, new_states = [], []
    for i, (W, g, s) in enumerate(zip(params, grads, st.opt_states)):
        ps = projections[i]
        if ps is None:
            delta, s = optimizer_step(s, g)
            step_dir = delta
        else:
            delta, s = optimizer_step(s, ps.P.T @ g)
            step_dir = ps.P @ delta
        if st.weight_decay_W:
            step_dir = step_dir - st.weight_decay_W * W
        new_params.append(W + lr * step_dir)
        new_states.append(s)

    if parallel and online:
        for i in online:
            projections[i] = futures[i].result()
        if timing:
            wall += time.perf_counter() - t0
    else:
        for i in online:
            t0 = time.perf_counter() if timing else 0.0
            projections[i] = update_projection(projections[i], grads[i], lr, st.weight_decay_P)
            if timing:
                wall += time.perf_counter() - t0
    for i, ps in enumerate(projections):
        if ps is not None and isinstance(ps.updater, Static):
            projections[i] = replace(ps, step=ps.step + 1)

    for i, W in enumerate(new_params):
        if not np.all(np.isfinite(W)):
            raise NonFiniteError(f"parameter {i} became non-finite at step {st.step}")

    record = TrajectoryRecord(st.step, loss, grad_norm, hamiltonian, defect, lr, 1000.0 * wall)
    new_st = replace(st, params=new_params, opt_states=new_states, projections=projections, step=st.step + 1)
    return new_st, record


def train(st: SubspaceTrainerState, problem, steps: int, **kw):
    """Run ``steps`` iterations on a Problem; returns (state, records)."""
    records = []
    step = partial(train_step, grad_fn=problem.grad, loss_fn=problem.loss, **kw)
    for _ in range(steps):
        st, rec = step(st)
        records.append(rec)
    return st, records
