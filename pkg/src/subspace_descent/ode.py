"""Continuous-time simulation of (projected) Hamiltonian descent systems.

The state is ``(W, M, V, P)``: weights, first and second optimizer buffers
(``V`` only for Adam) and the projection (``None`` for the full-space
system). The projection follows ``P' = Gamma(P, grad L(W))`` where Gamma is
either plain gradient flow on the PCA loss or frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import NamedTuple, Optional, Union

import numpy as np

from .hamiltonian import HamiltonianSpec, continuous_descent_rate, hamiltonian_value
from .optimizers import ADAM, LION_K, MOMENTUM
from .problems import Problem
from .projection import init_projection, orthodefect

BLOWUP_NORM = 1e12


class OdeBlowUp(FloatingPointError):
    pass


class OdeState(NamedTuple):
    W: np.ndarray
    M: np.ndarray
    V: Optional[np.ndarray] = None
    P: Optional[np.ndarray] = None


@dataclass(frozen=True)
class PcaGradientFlow:
    """P' = -rate * grad_P of the PCA loss at the current gradient."""

    lam: float = 0.1
    rate: float = 1.0


@dataclass(frozen=True)
class Frozen:
    pass


Gamma = Union[PcaGradientFlow, Frozen]


@dataclass(eq=False)
class OdeSystem:
    spec: HamiltonianSpec
    problem: Problem
    state: OdeState
    gamma: Gamma = field(default_factory=Frozen)
    # False removes the -m damping from Momentum: a pure Hamiltonian flow.
    dissipative: bool = True

    def __post_init__(self):
        if self.spec.family == ADAM and self.state.V is None:
            raise ValueError("Adam system needs a V buffer")
        if not self.dissipative and self.spec.family != MOMENTUM:
            raise ValueError("the conservative variant is only defined for Momentum")

    @property
    def projected(self) -> bool:
        return self.state.P is not None


def _combine(y: OdeState, h: float, dy: OdeState) -> OdeState:
    return OdeState(*(None if a is None else a + h * b for a, b in zip(y, dy)))


def _T(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _sum2(x: np.ndarray):
    """Sum over the trailing matrix axes (a float for a single matrix)."""
    return x.sum(axis=(-2, -1))


def pca_flow(P: np.ndarray, G: np.ndarray, lam: float) -> np.ndarray:
    """Minus the PCA-loss gradient in P; zero where G vanishes.

    Works on a single ``n x k`` P or on a stack ``(B, n, k)``.
    """
    norm = np.sqrt(_sum2(G * G))[..., None, None]
    Gn = G / np.where(norm > 0, norm, 1.0)
    C = Gn @ (_T(Gn) @ P)
    F = _T(P) @ P - np.eye(P.shape[-1])
    grad = 2.0 * (P @ (_T(P) @ C) - C + C @ F) + 4.0 * lam * (P @ F)
    return np.where(norm > 0, -grad, 0.0)


def drift(spec: HamiltonianSpec, grad_fn, y: OdeState, gamma: Gamma = Frozen(), dissipative: bool = True):
    """Drift of the (projected) system at ``y``; returns ``(dy/dt, grad L(W))``.

    Every array in ``y`` may carry a leading batch axis as long as
    ``grad_fn`` maps a stack of W to a stack of gradients.
    """
    W, M, V, P = y
    G = grad_fn(W)
    g = G if P is None else _T(P) @ G
    a = spec.a
    dV = None
    if spec.family == MOMENTUM:
        dW = -M if P is None else -(P @ M)
        dM = a * (g - M) if dissipative else a * g
    elif spec.family == ADAM:
        r = M / (np.sqrt(np.maximum(V, 0.0)) + spec.e)
        dW = -r if P is None else -(P @ r)
        dM = a * (g - M)
        dV = spec.b * (g * g - V)
    else:
        b = spec.b
        d = spec.K.grad((1.0 - b) * M - b * g)
        dW = d if P is None else P @ d
        dM = -a * (g + M)
    dP = None
    if P is not None:
        if isinstance(gamma, PcaGradientFlow):
            dP = gamma.rate * pca_flow(P, G, gamma.lam)
        else:
            dP = np.zeros_like(P)
    return OdeState(dW, dM, dV, dP), G


def hamiltonian_stack(spec: HamiltonianSpec, L, M: np.ndarray, V: Optional[np.ndarray] = None):
    """H for one state or a stack of states (``L`` then has one entry per state)."""
    if spec.family == MOMENTUM:
        return L + _sum2(M * M) / (2.0 * spec.a)
    if spec.family == ADAM:
        return L + _sum2(M * M / (np.sqrt(V) + spec.e)) / (2.0 * spec.a)
    c = 1.0 - spec.b
    return spec.a * L + _sum2(spec.K.entries(c * M)) / c


def vector_field(sys: OdeSystem, y: OdeState):
    """Returns ``(dy/dt, grad L(W))``."""
    return drift(sys.spec, lambda W: sys.problem.grad([W])[0], y, sys.gamma, sys.dissipative)


def _step(f, y: OdeState, h: float, method: str, k1=None):
    """One Euler or RK4 step of ``y' = f(y)[0]``."""
    if k1 is None:
        k1, _ = f(y)
    if method == "euler":
        y_new = _combine(y, h, k1)
    else:
        k2, _ = f(_combine(y, 0.5 * h, k1))
        k3, _ = f(_combine(y, 0.5 * h, k2))
        k4, _ = f(_combine(y, h, k3))
        y_new = OdeState(*(
            None if a is None else a + (h / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
            for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)
        ))
    if y_new.V is not None:
        # Keep the EMA of squares non-negative at coarse steps.
        y_new = y_new._replace(V=np.maximum(y_new.V, 0.0))
    return y_new


def _check_blowup(y: OdeState, step: int, h: float) -> None:
    for name, x in zip(OdeState._fields, y):
        if x is None:
            continue
        norm = np.linalg.norm(x)
        if not np.isfinite(norm) or norm > BLOWUP_NORM:
            raise OdeBlowUp(f"|{name}| = {norm:.3e} at step {step} (t = {step * h:.6g})")


def hamiltonian_at(sys: OdeSystem, y: OdeState) -> float:
    L = sys.problem.loss([y.W])
    return hamiltonian_value(sys.spec, L, (y.M, y.V))


def descent_rate_at(sys: OdeSystem, y: OdeState, G=None) -> float:
    if G is None:
        G = sys.problem.grad([y.W])[0]
    return continuous_descent_rate(sys.spec, y.W, (y.M, y.V), y.P, G)


@dataclass(eq=False)
class Trajectory:
    h: float
    method: str
    t: np.ndarray
    loss: np.ndarray
    H: np.ndarray
    dHdt: np.ndarray
    grad_norm: np.ndarray
    dW_norm: np.ndarray
    ortho: np.ndarray
    final: OdeState
    states: Optional[list] = None

    def rows(self):
        """Rows in trajectory-CSV column order; lr holds h and the timing column is 0."""
        for i in range(len(self.t)):
            yield (i, self.loss[i], self.grad_norm[i], self.H[i], self.ortho[i], self.h, 0.0)


def integrate(sys: OdeSystem, h: float, steps: int, method: str = "rk4",
              keep_states: bool = False, with_rate: bool = True) -> Trajectory:
    """Integrate ``steps`` steps of size ``h``; samples L, H and dH/dt at every point."""
    if not h > 0:
        raise ValueError("step size h must be positive")
    if method not in ("rk4", "euler"):
        raise ValueError(f"unknown method {method!r}")
    y = sys.state
    n = steps + 1
    loss = np.empty(n)
    H = np.empty(n)
    rate = np.full(n, np.nan)
    gnorm = np.empty(n)
    dwnorm = np.empty(n)
    ortho = np.zeros(n)
    states = [y] if keep_states else None
    for i in range(n):
        k1, G = vector_field(sys, y)
        L = sys.problem.loss([y.W])
        loss[i] = L
        H[i] = hamiltonian_value(sys.spec, L, (y.M, y.V))
        gnorm[i] = np.linalg.norm(G)
        dwnorm[i] = np.linalg.norm(k1.W)
        if y.P is not None:
            ortho[i] = orthodefect(y.P)
        if with_rate:
            rate[i] = continuous_descent_rate(sys.spec, y.W, (y.M, y.V), y.P, G)
        if i == steps:
            break
        y = _step(partial(vector_field, sys), y, h, method, k1)
        _check_blowup(y, i + 1, h)
        if keep_states:
            states.append(y)
    return Trajectory(h, method, h * np.arange(n), loss, H, rate, gnorm, dwnorm, ortho, y, states)


def max_h_increase(traj: Trajectory) -> float:
    """Largest one-step increase of H (0 if H never goes up)."""
    d = np.diff(traj.H)
    return float(max(d.max(initial=0.0), 0.0))


def rate_discrepancy(traj: Trajectory) -> float:
    """max_i |(H_{i+1} - H_i)/h - dH/dt(t_i)| along the trajectory."""
    fd = np.diff(traj.H) / traj.h
    return float(np.max(np.abs(fd - traj.dHdt[:-1])))


@dataclass(frozen=True)
class ProbeReport:
    t_end: float
    steps: int
    grad_norm: float
    loss: float
    stalled: bool
    passed: bool
    reason: str


def stationarity_probe(sys: OdeSystem, h: float, t_max: float, tol_grad: float = 1e-5,
                       method: str = "rk4", stall_tol: float = 1e-8, sustain: float = 1.0) -> ProbeReport:
    """Integrate until ||dW/dt|| <= stall_tol for ``sustain`` time units, or t_max.

    Reports the final ||grad L|| and whether it is within ``tol_grad``.
    Running out of time is reported, not raised.
    """
    y = sys.state
    max_steps = int(round(t_max / h))
    need = max(1, int(round(sustain / h)))
    quiet = 0
    reason = "t_max"
    i = 0
    f = partial(vector_field, sys)
    while True:
        k1, G = f(y)
        if all(d is None or not np.any(d) for d in k1):
            reason = "equilibrium"
            break
        if np.linalg.norm(k1.W) <= stall_tol:
            quiet += 1
            if quiet >= need:
                reason = "stalled"
                break
        else:
            quiet = 0
        if i >= max_steps:
            break
        y = _step(f, y, h, method, k1)
        i += 1
        _check_blowup(y, i, h)
    gnorm = float(np.linalg.norm(G))
    return ProbeReport(i * h, i, gnorm, float(sys.problem.loss([y.W])),
                       reason in ("stalled", "equilibrium"), gnorm <= tol_grad, reason)


def random_start(problem: Problem, spec: HamiltonianSpec, k: Optional[int], seed: int,
                 momentum_scale: float = 0.5) -> OdeState:
    """Seeded initial state: problem init for W, Gaussian M, orthonormal P.

    Adam's V starts at a random multiple of ``g^2 + 1`` so it is already on
    the scale it tracks; a V far below g^2 makes the first instants stiff.
    """
    rng = np.random.default_rng(seed)
    W = problem.init(seed)[0]
    n, m = W.shape
    rows = n if k is None else k
    M = momentum_scale * rng.standard_normal((rows, m))
    P = None if k is None else init_projection(n, k, seed + 17)
    V = None
    if spec.family == ADAM:
        G = problem.grad([W])[0]
        g = G if P is None else P.T @ G
        V = rng.uniform(0.5, 1.5, (rows, m)) * (g * g + 1.0)
    return OdeState(W, M, V, P)


# --- many seeds at once on one quadratic -----------------------------------------


@dataclass(eq=False)
class EnsembleTrajectory:
    h: float
    method: str
    t: np.ndarray
    loss: np.ndarray        # (B, steps + 1)
    H: np.ndarray           # (B, steps + 1)
    grad_norm: np.ndarray   # (B, steps + 1)
    final: OdeState         # stacked arrays


def stack_states(states) -> OdeState:
    return OdeState(*(None if parts[0] is None else np.stack(parts) for parts in zip(*states)))


def integrate_ensemble(spec: HamiltonianSpec, problem: Problem, starts, h: float, steps: int,
                       gamma: Gamma = Frozen(), method: str = "rk4",
                       dissipative: bool = True) -> EnsembleTrajectory:
    """Integrate several starting states together on a quadratic problem.

    Same arithmetic as running ``integrate`` once per start, but the states
    are stacked along a leading axis so each RK stage is a handful of batched
    matrix products.
    """
    if "hessian" not in problem.data:
        raise ValueError("ensemble integration needs a quadratic problem")
    if not h > 0:
        raise ValueError("step size h must be positive")
    if method not in ("rk4", "euler"):
        raise ValueError(f"unknown method {method!r}")
    if not dissipative and spec.family != MOMENTUM:
        raise ValueError("the conservative variant is only defined for Momentum")
    Hess, A, W_star = problem.data["hessian"], problem.data["A"], problem.data["W_star"]
    f = partial(drift, spec, lambda W: Hess @ (W - W_star), gamma=gamma, dissipative=dissipative)
    y = stack_states(starts)
    if spec.family == ADAM and y.V is None:
        raise ValueError("Adam system needs a V buffer")
    B = y.W.shape[0]
    n = steps + 1
    loss = np.empty((B, n))
    H = np.empty((B, n))
    gnorm = np.empty((B, n))
    for i in range(n):
        k1, G = f(y)
        R = A @ (y.W - W_star)
        loss[:, i] = 0.5 * _sum2(R * R)
        H[:, i] = hamiltonian_stack(spec, loss[:, i], y.M, y.V)
        gnorm[:, i] = np.sqrt(_sum2(G * G))
        if i == steps:
            break
        y = _step(f, y, h, method, k1)
        _check_blowup(y, i + 1, h)
    return EnsembleTrajectory(h, method, h * np.arange(n), loss, H, gnorm, y)


def roundoff_floor(H: np.ndarray) -> float:
    """Size of an H increase explainable by floating-point noise alone."""
    return 64.0 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(H))))


def lyapunov_violation(H: np.ndarray) -> float:
    """Largest one-step increase of H above the roundoff floor (0 if none)."""
    d = np.diff(np.asarray(H), axis=-1)
    worst = float(max(d.max(initial=0.0), 0.0))
    return worst if worst > roundoff_floor(H) else 0.0
