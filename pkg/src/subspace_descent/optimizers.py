"""Full-space optimizers written as ``(delta, state) = step(state, grad)``.

``delta`` already carries the descent sign, so a caller applies it as
``W + lr * delta``. States are immutable; every step returns a fresh one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .matrix import NonFiniteError, ShapeError

GD = "GD"
MOMENTUM = "Momentum"
ADAM = "Adam"
LION_K = "LionK"
KINDS = (GD, MOMENTUM, ADAM, LION_K)


# --- convex potentials K for Lion-K -------------------------------------------


class KFunction:
    """A convex function with minimum 0 at the origin and its gradient."""

    name = "base"

    def entries(self, x: np.ndarray) -> np.ndarray:
        """Per-entry contributions; ``value`` is their sum."""
        raise NotImplementedError

    def value(self, x: np.ndarray) -> float:
        return float(np.sum(self.entries(x)))

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"name": self.name}

    def __eq__(self, other):
        return isinstance(other, KFunction) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(tuple(sorted(self.to_dict().items())))

    def __repr__(self):
        return f"{type(self).__name__}({self.to_dict()})"


class L1(KFunction):
    """Entrywise L1 norm; gradient is sign with sign(0) = 0 (plain Lion)."""

    name = "l1"

    def entries(self, x):
        return np.abs(x)

    def grad(self, x):
        return np.sign(x)


class SmoothL1(KFunction):
    """sum(sqrt(x^2 + delta^2) - delta), a C-infinity stand-in for L1.

    Its gradient x / sqrt(x^2 + delta^2) is bounded by 1 like sign, but is
    smooth, which the ODE integrators need to show their convergence order.
    """

    name = "smooth_l1"

    def __init__(self, delta: float = 0.1):
        if not delta > 0:
            raise ValueError("delta must be positive")
        self.delta = float(delta)

    def entries(self, x):
        d = self.delta
        return np.sqrt(x * x + d * d) - d

    def grad(self, x):
        return x / np.sqrt(x * x + self.delta**2)

    def to_dict(self):
        return {"name": self.name, "delta": self.delta}


class HalfSquare(KFunction):
    """K(x) = ||x||^2 / 2; Lion-K then reduces to a momentum method."""

    name = "half_square"

    def entries(self, x):
        return 0.5 * x * x

    def grad(self, x):
        return np.array(x, dtype=np.float64, copy=True)


def k_from_dict(d: dict | str | None) -> KFunction:
    if d is None:
        return L1()
    if isinstance(d, str):
        d = {"name": d}
    name = d.get("name", "l1")
    if name == "l1":
        return L1()
    if name == "smooth_l1":
        return SmoothL1(d.get("delta", 0.1))
    if name == "half_square":
        return HalfSquare()
    raise ValueError(f"unknown K function {name!r}")


# --- optimizer kinds and state ------------------------------------------------


@dataclass(frozen=True)
class OptimizerKind:
    tag: str = ADAM
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    K: KFunction = field(default_factory=L1)

    def __post_init__(self):
        if self.tag not in KINDS:
            raise ValueError(f"unknown optimizer {self.tag!r}; expected one of {KINDS}")
        for name in ("beta", "beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def has_m(self) -> bool:
        return self.tag != GD

    @property
    def has_v(self) -> bool:
        return self.tag == ADAM

    def to_dict(self) -> dict:
        d = {"tag": self.tag}
        if self.tag == MOMENTUM:
            d["beta"] = self.beta
        elif self.tag == ADAM:
            d.update(beta1=self.beta1, beta2=self.beta2, eps=self.eps)
        elif self.tag == LION_K:
            d.update(beta1=self.beta1, beta2=self.beta2, K=self.K.to_dict())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerKind":
        d = dict(d)
        if "K" in d:
            d["K"] = k_from_dict(d["K"])
        return cls(**d)


def gd() -> OptimizerKind:
    return OptimizerKind(GD)


def momentum(beta: float = 0.9) -> OptimizerKind:
    return OptimizerKind(MOMENTUM, beta=beta)


def adam(beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerKind:
    return OptimizerKind(ADAM, beta1=beta1, beta2=beta2, eps=eps)


def lion(beta1: float = 0.9, beta2: float = 0.99, K: Optional[KFunction] = None) -> OptimizerKind:
    return OptimizerKind(LION_K, beta1=beta1, beta2=beta2, K=K or L1())


def make_kind(name: str, **hyper) -> OptimizerKind:
    """Build a kind from a loose name ("adam", "sgd", "lion", ...)."""
    aliases = {
        "gd": GD, "sgd": GD, "momentum": MOMENTUM, "adam": ADAM,
        "lion": LION_K, "lionk": LION_K, "lion-k": LION_K,
    }
    tag = aliases.get(name.lower(), name)
    if "K" in hyper:
        hyper["K"] = k_from_dict(hyper["K"])
    base = OptimizerKind(tag)
    defaults = {"beta2": 0.99} if tag == LION_K else {}
    return replace(base, **{**defaults, **hyper})


@dataclass(frozen=True, eq=False)
class OptimizerState:
    kind: OptimizerKind
    M: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None
    t: int = 0

    def buffers(self):
        return [b for b in (self.M, self.V) if b is not None]

    def num_scalars(self) -> int:
        return sum(b.size for b in self.buffers())

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.to_dict(),
            "t": self.t,
            "M": None if self.M is None else self.M.tolist(),
            "V": None if self.V is None else self.V.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        arr = lambda x: None if x is None else np.asarray(x, dtype=np.float64)  # noqa: E731
        return cls(OptimizerKind.from_dict(d["kind"]), arr(d["M"]), arr(d["V"]), int(d["t"]))


def init_state(kind: OptimizerKind, shape) -> OptimizerState:
    """Zero buffers of the given shape (only those the kind needs)."""
    M = np.zeros(shape) if kind.has_m else None
    V = np.zeros(shape) if kind.has_v else None
    return OptimizerState(kind, M, V, 0)


def adam_beta(beta: float, t: int) -> float:
    """Bias-corrected coefficient (beta - beta^(t+1)) / (1 - beta^(t+1))."""
    p = beta ** (t + 1)
    return (beta - p) / (1.0 - p)


def optimizer_step(state: OptimizerState, grad: np.ndarray):
    """One update. Returns ``(delta, new_state)`` with ``t`` incremented."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("gradient contains NaN or Inf")
    for buf in state.buffers():
        if buf.shape != grad.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match state {buf.shape}")

    kind = state.kind
    t = state.t
    if kind.tag == GD:
        return -grad, replace(state, t=t + 1)

    if kind.tag == MOMENTUM:
        M = (1 - kind.beta) * grad + kind.beta * state.M
        return -M, replace(state, M=M, t=t + 1)

    if kind.tag == ADAM:
        b1 = adam_beta(kind.beta1, t)
        b2 = adam_beta(kind.beta2, t)
        M = (1 - b1) * grad + b1 * state.M
        V = (1 - b2) * grad * grad + b2 * state.V
        delta = -M / (np.sqrt(V) + kind.eps)
        return delta, replace(state, M=M, V=V, t=t + 1)

    # Lion-K: N is built from the momentum *before* its own update.
    N = (1 - kind.beta1) * grad + kind.beta1 * state.M
    delta = -kind.K.grad(N)
    M = (1 - kind.beta2) * grad + kind.beta2 * state.M
    return delta, replace(state, M=M, t=t + 1)
