"""Lyapunov (Hamiltonian) functions for Momentum, Adam and Lion-K.

The continuous-time systems these belong to are, with ``g = P^T grad L``
(``P = I`` in full space)::

    Momentum:  W' = -P m,               m' = a (g - m)
    Adam:      W' = -P m / (sqrt(v)+e), m' = a (g - m),  v' = b (g^2 - v)
    Lion-K:    W' = P dK((1-b) M - b g), M' = -a (g + M)

and the matching Hamiltonians are ``L + |m|^2 / 2a``,
``L + <m / (sqrt(v)+e), m> / 2a`` and ``a L + K((1-b) M) / (1-b)``.
None of these depends on how P moves, and neither do the descent rates
below: they take P as a given value.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .optimizers import ADAM, GD, LION_K, MOMENTUM, KFunction, L1, OptimizerKind, OptimizerState

FAMILIES = (MOMENTUM, ADAM, LION_K)


@dataclass(frozen=True)
class HamiltonianSpec:
    family: str
    a: float = 1.0
    b: float = 0.0
    e: float = 1e-8
    K: KFunction = field(default_factory=L1)
    projected: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if not self.a > 0:
            raise ValueError("a must be positive")
        if self.family == ADAM and not (self.b >= 0 and self.e > 0):
            raise ValueError("Adam needs b >= 0 and e > 0")
        if self.family == LION_K and not 0.0 <= self.b < 1.0:
            raise ValueError("Lion-K needs b in [0, 1)")

    @property
    def descent_valid(self) -> bool:
        """Whether the analytic rate is guaranteed non-positive."""
        return self.family != ADAM or self.a >= self.b / 4.0


def _buffers(S):
    """Accept an OptimizerState or a (M, V) / M tuple."""
    if isinstance(S, OptimizerState):
        return S.M, S.V
    if isinstance(S, tuple):
        return (S + (None,))[:2]
    return S, None


def hamiltonian_value(spec: HamiltonianSpec, L_val: float, S) -> float:
    M, V = _buffers(S)
    if M is None:
        raise ValueError(f"{spec.family} Hamiltonian needs a momentum buffer")
    if spec.family == MOMENTUM:
        return float(L_val + np.vdot(M, M) / (2.0 * spec.a))
    if spec.family == ADAM:
        if V is None:
            raise ValueError("Adam Hamiltonian needs a second-moment buffer")
        return float(L_val + np.sum(M * M / (np.sqrt(V) + spec.e)) / (2.0 * spec.a))
    c = 1.0 - spec.b
    return float(spec.a * L_val + spec.K.value(c * M) / c)


def k_bracket(K: KFunction, X: np.ndarray, Y: np.ndarray) -> float:
    """[X; Y] = <Y, dK(X + Y) - dK(X)>, non-negative for convex K."""
    return float(np.vdot(Y, K.grad(X + Y) - K.grad(X)))


def continuous_descent_rate(spec: HamiltonianSpec, W, S, P: Optional[np.ndarray], grad) -> float:
    """Exact dH/dt of the (projected) continuous system at one point.

    ``W`` is accepted for symmetry with the state but no rate depends on it
    beyond ``grad``. ``P = None`` means the full-space system.
    """
    M, V = _buffers(S)
    g = grad if P is None else P.T @ grad
    if spec.family == MOMENTUM:
        return -float(np.vdot(M, M))

    if spec.family == ADAM:
        a, b, e = spec.a, spec.b, spec.e
        sv = np.sqrt(V)
        m2 = M * M
        first = np.sum((1.0 - (b / (4 * a)) * sv / (sv + e)) * m2 / (sv + e))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(m2 * g * g > 0, m2 * g * g / (sv * (sv + e) ** 2), 0.0)
        return -float(first) - (b / (4 * a)) * float(np.sum(ratio))

    a, b, K = spec.a, spec.b, spec.K
    c = 1.0 - b
    second = -(a / c) * k_bracket(K, np.zeros_like(M), c * M)
    if b == 0.0:
        return second
    return -(a / b) * k_bracket(K, c * M, -b * g) + second


def adam_rate_bound(spec: HamiltonianSpec, S, P, grad) -> float:
    """The final upper bound of the Adam descent chain (<= 0 when a >= b/4)."""
    M, V = _buffers(S)
    g = grad if P is None else P.T @ grad
    a, b, e = spec.a, spec.b, spec.e
    sv = np.sqrt(V)
    t1 = np.sum(M * M / (sv + e))
    with np.errstate(divide="ignore", invalid="ignore"):
        t2 = np.sum(np.where(M * g != 0, (M * g) ** 2 / (np.sqrt(sv) * (sv + e)) ** 2, 0.0))
    return -(1 - b / (4 * a)) * float(t1) - (b / (4 * a)) * float(t2)


# --- discrete optimizers viewed through their continuous limit ------------------


def spec_for_discrete(kind: OptimizerKind, lr: float, projected: bool = False) -> Optional[HamiltonianSpec]:
    """Continuous coefficients matching a discrete optimizer at step size ``lr``.

    Momentum ``a = (1-beta)/lr``; Adam ``a = (1-beta1)/lr, b = (1-beta2)/lr``;
    Lion-K ``a = (1-beta2)/lr, b = 1-beta1``. GD has no state, so ``None``.
    """
    if kind.tag == GD or lr <= 0:
        return None
    if kind.tag == MOMENTUM:
        return HamiltonianSpec(MOMENTUM, a=(1 - kind.beta) / lr, projected=projected)
    if kind.tag == ADAM:
        return HamiltonianSpec(ADAM, a=(1 - kind.beta1) / lr, b=(1 - kind.beta2) / lr, e=kind.eps,
                               projected=projected)
    return HamiltonianSpec(LION_K, a=(1 - kind.beta2) / lr, b=1 - kind.beta1, K=kind.K, projected=projected)


def discrete_state_term(state: OptimizerState, lr: float) -> float:
    """H - L for a discrete optimizer state (zero for GD or lr = 0).

    Lion's discrete momentum tracks +grad while the continuous M tracks -grad;
    K is even for every K we ship, so the sign does not matter here. Lion's
    Hamiltonian scales L by ``a``; it is divided out so terms from different
    parameters can be summed onto a single loss.
    """
    spec = spec_for_discrete(state.kind, lr)
    if spec is None:
        return 0.0
    H = hamiltonian_value(spec, 0.0, state)
    return H / spec.a if spec.family == LION_K else H
