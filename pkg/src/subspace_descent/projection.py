"""Projection matrices P (n x k) and the rules that move them.

Three updaters are supported:

* ``OnlinePCA``: one optimizer step per iteration on the regularised PCA loss
  ``||P P^T Gn - Gn||^2 + lam ||P^T P - I||^2`` with ``Gn = G / ||G||``.
* ``PeriodicSVD``: every ``period`` steps, reset P to the top-k left singular
  vectors of the raw gradient.
* ``Static``: P never moves.

The loss gradient is evaluated without ever forming the n x n matrix
``Gn Gn^T``, so one online step costs O(n m k).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from . import svd as svd_oracle
from .matrix import ShapeError, as_matrix, check_finite
from .optimizers import OptimizerKind, OptimizerState, adam, init_state, optimizer_step


class ZeroGradientError(ValueError):
    """The PCA objective is undefined for a zero gradient."""


# --- the PCA objective --------------------------------------------------------


def _normalized(G: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(G)
    if norm == 0.0:
        raise ZeroGradientError("gradient has zero norm; skip the projection update")
    return G / norm


def _check_shapes(P: np.ndarray, G: np.ndarray) -> None:
    if P.shape[0] != G.shape[0]:
        raise ShapeError(f"P is {P.shape} but G is {G.shape}; row counts must agree")
    if P.shape[1] > P.shape[0]:
        raise ShapeError(f"rank k={P.shape[1]} exceeds n={P.shape[0]}")


def pca_loss(P, G, lam: float) -> float:
    P = as_matrix(P, "P")
    G = as_matrix(G, "G")
    _check_shapes(P, G)
    Gn = _normalized(G)
    resid = P @ (P.T @ Gn) - Gn
    F = P.T @ P - np.eye(P.shape[1])
    return float(np.vdot(resid, resid) + lam * np.vdot(F, F))


def pca_loss_grad(P, G, lam: float) -> np.ndarray:
    """Gradient of :func:`pca_loss` with respect to P.

    With ``A = Gn Gn^T``, ``E = P P^T - I`` and ``F = P^T P - I`` the
    gradient is ``2 (E A + A E) P + 4 lam P F``. Using ``C = A P`` this is
    ``2 (P (P^T C) - C + C F) + 4 lam P F``.
    """
    P = as_matrix(P, "P")
    G = as_matrix(G, "G")
    _check_shapes(P, G)
    Gn = _normalized(G)
    C = Gn @ (Gn.T @ P)
    F = P.T @ P - np.eye(P.shape[1])
    return 2.0 * (P @ (P.T @ C) - C + C @ F) + 4.0 * lam * (P @ F)


def orthodefect(P) -> float:
    """||P^T P - I||_F."""
    P = np.asarray(P)
    F = P.T @ P - np.eye(P.shape[1])
    return float(np.linalg.norm(F))


def init_projection(n: int, k: int, seed: int = 0) -> np.ndarray:
    """Random n x k matrix with orthonormal columns (Gaussian fill, then QR)."""
    if not 1 <= k <= n:
        raise ShapeError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    Q, R = np.linalg.qr(rng.standard_normal((n, k)))
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    return Q * signs


# --- updaters -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OnlinePCA:
    opt_state: OptimizerState
    lam: float = 0.1
    alpha: float = 5.0

    name = "online_pca"


@dataclass(frozen=True)
class PeriodicSVD:
    period: int = 200

    name = "periodic_svd"

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("SVD period must be a positive integer")


@dataclass(frozen=True)
class Static:
    name = "static"


Updater = Union[OnlinePCA, PeriodicSVD, Static]


@dataclass(frozen=True, eq=False)
class ProjectionState:
    P: np.ndarray
    updater: Updater = field(default_factory=Static)
    step: int = 0

    def __post_init__(self):
        P = as_matrix(self.P, "P")
        if P.shape[1] < 1 or P.shape[1] > P.shape[0]:
            raise ShapeError(f"P must be n x k with 1 <= k <= n, got {P.shape}")
        check_finite(P, "P")
        if isinstance(self.updater, OnlinePCA):
            bufs = self.updater.opt_state.buffers()
            if any(b.shape != P.shape for b in bufs):
                raise ShapeError("optimizer state for P must match the shape of P")
        object.__setattr__(self, "P", P)

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def k(self) -> int:
        return self.P.shape[1]

    def num_scalars(self) -> int:
        """Scalars held by P and by P's own optimizer."""
        extra = self.updater.opt_state.num_scalars() if isinstance(self.updater, OnlinePCA) else 0
        return self.P.size + extra

    def to_dict(self) -> dict:
        u = self.updater
        if isinstance(u, OnlinePCA):
            upd = {"name": u.name, "lam": u.lam, "alpha": u.alpha, "opt_state": u.opt_state.to_dict()}
        elif isinstance(u, PeriodicSVD):
            upd = {"name": u.name, "period": u.period}
        else:
            upd = {"name": "static"}
        return {"P": self.P.tolist(), "step": self.step, "updater": upd}

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectionState":
        u = d["updater"]
        if u["name"] == OnlinePCA.name:
            upd = OnlinePCA(OptimizerState.from_dict(u["opt_state"]), u["lam"], u["alpha"])
        elif u["name"] == PeriodicSVD.name:
            upd = PeriodicSVD(u["period"])
        else:
            upd = Static()
        return cls(np.asarray(d["P"], dtype=np.float64), upd, int(d["step"]))


def online_pca_state(
    P: np.ndarray,
    kind: Optional[OptimizerKind] = None,
    lam: float = 0.1,
    alpha: float = 5.0,
) -> ProjectionState:
    """ProjectionState driven by online PCA; ``kind`` defaults to Adam."""
    kind = kind or adam()
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    return ProjectionState(P, OnlinePCA(init_state(kind, P.shape), lam, alpha))


def projection_update_online_pca(
    ps: ProjectionState, G, eps_W: float, weight_decay_P: float = 0.0
) -> ProjectionState:
    """One optimizer step on the PCA loss, with learning rate ``alpha * eps_W``."""
    upd = ps.updater
    if not isinstance(upd, OnlinePCA):
        raise TypeError("projection state is not driven by online PCA")
    grad = pca_loss_grad(ps.P, G, upd.lam)
    delta, opt_state = optimizer_step(upd.opt_state, grad)
    eps_P = upd.alpha * eps_W
    P = ps.P + eps_P * (delta - weight_decay_P * ps.P)
    return ProjectionState(P, replace(upd, opt_state=opt_state), ps.step + 1)


def projection_update_periodic_svd(ps: ProjectionState, G) -> ProjectionState:
    """Reset P to the top-k left singular vectors of G when ``step % T == 0``."""
    upd = ps.updater
    if not isinstance(upd, PeriodicSVD):
        raise TypeError("projection state is not driven by periodic SVD")
    if ps.step % upd.period == 0:
        P = svd_oracle.top_k_left(G, ps.k)
    else:
        P = ps.P
    return ProjectionState(P, upd, ps.step + 1)


def update_projection(
    ps: ProjectionState, G, eps_W: float, weight_decay_P: float = 0.0
) -> ProjectionState:
    """Dispatch on the updater. A zero gradient leaves P and its state alone."""
    G = np.asarray(G)
    if isinstance(ps.updater, Static):
        return replace(ps, step=ps.step + 1)
    if not np.any(G):
        return replace(ps, step=ps.step + 1)
    if isinstance(ps.updater, OnlinePCA):
        return projection_update_online_pca(ps, G, eps_W, weight_decay_P)
    return projection_update_periodic_svd(ps, G)


# --- general linear operators ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class LinearOperator:
    """X -> P X (left), P X Q (two_sided) or P X + X Q (sum_sided)."""

    kind: str
    P: np.ndarray
    Q: Optional[np.ndarray] = None

    KINDS = ("left", "two_sided", "sum_sided")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.kind != "left" and self.Q is None:
            raise ValueError(f"{self.kind} operator needs Q")
        if self.kind == "sum_sided":
            for name, M in (("P", self.P), ("Q", self.Q)):
                if M.shape[0] != M.shape[1]:
                    raise ShapeError(f"sum_sided operator needs square {name}, got {M.shape}")


def operator_apply(op: LinearOperator, X) -> np.ndarray:
    X = as_matrix(X, "X")
    try:
        if op.kind == "left":
            return op.P @ X
        if op.kind == "two_sided":
            return op.P @ X @ op.Q
        return op.P @ X + X @ op.Q
    except ValueError as exc:
        raise ShapeError(f"{op.kind} operator cannot act on {X.shape}: {exc}") from None


def operator_adjoint(op: LinearOperator, Y) -> np.ndarray:
    Y = as_matrix(Y, "Y")
    try:
        if op.kind == "left":
            return op.P.T @ Y
        if op.kind == "two_sided":
            return op.P.T @ Y @ op.Q.T
        return op.P.T @ Y + Y @ op.Q.T
    except ValueError as exc:
        raise ShapeError(f"{op.kind} adjoint cannot act on {Y.shape}: {exc}") from None
