"""Differentiable test problems with matrix-shaped parameters.

Every problem takes and returns *lists* of arrays so single-matrix and
multi-layer problems share one interface. 2-D entries are eligible for
projection; 1-D entries (biases) are always trained full-rank.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

NOISE_SIGMA = 0.01


@dataclass(eq=False)
class Problem:
    name: str
    shapes: list
    loss_fn: Callable
    grad_fn: Callable
    init_fn: Callable
    optimum: Optional[dict] = None
    data: dict = field(default_factory=dict)

    def loss(self, params) -> float:
        return float(self.loss_fn(params))

    def grad(self, params) -> list:
        return self.grad_fn(params)

    def init(self, seed: int = 0) -> list:
        return self.init_fn(seed)


def quadratic(n: int, m: int, seed: int = 0, cond: float = 10.0, A=None, W_star=None) -> Problem:
    """L(W) = 1/2 ||A (W - W*)||^2 with A (n x n) of condition number ``cond``."""
    if n < 1 or m < 1:
        raise ValueError("n and m must be positive")
    if not 1.0 <= cond <= 100.0:
        raise ValueError("cond must lie in [1, 100]")
    rng = np.random.default_rng(seed)
    if A is None:
        Q1, _ = np.linalg.qr(rng.standard_normal((n, n)))
        Q2, _ = np.linalg.qr(rng.standard_normal((n, n)))
        s = np.exp(rng.uniform(0.0, np.log(cond), n))
        s[0] = 1.0
        if n > 1:
            s[-1] = cond
        A = (Q1 * s) @ Q2.T
    else:
        A = np.asarray(A, dtype=np.float64)
    W_star = rng.standard_normal((n, m)) if W_star is None else np.asarray(W_star, dtype=np.float64)
    H = A.T @ A

    def loss(params):
        R = A @ (params[0] - W_star)
        return 0.5 * np.vdot(R, R)

    def grad(params):
        return [H @ (params[0] - W_star)]

    def init(s):
        return [np.random.default_rng(s + 1_000_003).standard_normal((n, m))]

    return Problem(
        f"quadratic({n},{m})", [(n, m)], loss, grad, init,
        optimum={"params": [W_star], "value": 0.0},
        data={"A": A, "hessian": H, "W_star": W_star, "seed": seed},
    )


def rosenbrock(start=(-1.5, 2.0)) -> Problem:
    """f(x1, x2) = (1 - x1)^2 + 10 (x2 - x1^2)^2 on a 2 x 1 parameter."""

    def loss(params):
        x1, x2 = params[0][:, 0]
        return (1.0 - x1) ** 2 + 10.0 * (x2 - x1 * x1) ** 2

    def grad(params):
        x1, x2 = params[0][:, 0]
        r = x2 - x1 * x1
        return [np.array([[-2.0 * (1.0 - x1) - 40.0 * x1 * r], [20.0 * r]])]

    def init(s):
        jitter = np.random.default_rng(s).normal(0.0, 0.1, (2, 1)) if s else 0.0
        return [np.array(start, dtype=np.float64).reshape(2, 1) + jitter]

    return Problem(
        "rosenbrock", [(2, 1)], loss, grad, init,
        optimum={"params": [np.ones((2, 1))], "value": 0.0},
    )


def _log_softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))


def logistic_regression(n_features: int, n_classes: int, n_samples: int, seed: int = 0) -> Problem:
    """Softmax cross-entropy on labels from a planted linear model.

    Parameters are ``[W (n_classes x n_features), b (n_classes,)]``.
    """
    if min(n_features, n_classes, n_samples) < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_samples, n_features))
    W_true = 3.0 * rng.standard_normal((n_classes, n_features)) / np.sqrt(n_features)
    b_true = np.zeros(n_classes)
    logits = X @ W_true.T + b_true + NOISE_SIGMA * rng.standard_normal((n_samples, n_classes))
    y = logits.argmax(axis=1)
    onehot = np.eye(n_classes)[y]

    def loss(params):
        W, b = params
        return -np.mean(np.sum(onehot * _log_softmax(X @ W.T + b), axis=1))

    def grad(params):
        W, b = params
        probs = np.exp(_log_softmax(X @ W.T + b))
        D = (probs - onehot) / n_samples
        return [D.T @ X, D.sum(axis=0)]

    def init(s):
        r = np.random.default_rng(s + 7)
        return [0.01 * r.standard_normal((n_classes, n_features)), np.zeros(n_classes)]

    return Problem(
        f"logistic_regression({n_features},{n_classes},{n_samples})",
        [(n_classes, n_features), (n_classes,)], loss, grad, init,
        optimum=None,
        data={"X": X, "y": y, "planted": [W_true, b_true], "seed": seed},
    )


def mlp_regression(n_in: int, hidden: int, n_out: int, n_samples: int = 512, seed: int = 0) -> Problem:
    """One tanh hidden layer, mean squared error, realizable targets plus noise.

    Parameters are ``[W1 (hidden x in), b1, W2 (out x hidden), b2]``.
    """
    if min(n_in, hidden, n_out, n_samples) < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_samples, n_in))
    planted = [
        rng.standard_normal((hidden, n_in)) / np.sqrt(n_in),
        0.1 * rng.standard_normal(hidden),
        rng.standard_normal((n_out, hidden)) / np.sqrt(hidden),
        0.1 * rng.standard_normal(n_out),
    ]
    Y = _mlp_forward(planted, X)[1] + NOISE_SIGMA * rng.standard_normal((n_samples, n_out))

    def loss(params):
        _, out = _mlp_forward(params, X)
        return np.mean((out - Y) ** 2)

    def grad(params):
        W1, b1, W2, b2 = params
        Hid, out = _mlp_forward(params, X)
        dout = 2.0 * (out - Y) / out.size
        dW2 = dout.T @ Hid
        db2 = dout.sum(axis=0)
        dZ = (dout @ W2) * (1.0 - Hid * Hid)
        return [dZ.T @ X, dZ.sum(axis=0), dW2, db2]

    def init(s):
        r = np.random.default_rng(s + 11)
        return [
            r.standard_normal((hidden, n_in)) / np.sqrt(n_in),
            np.zeros(hidden),
            r.standard_normal((n_out, hidden)) / np.sqrt(hidden),
            np.zeros(n_out),
        ]

    return Problem(
        f"mlp_regression({n_in},{hidden},{n_out})",
        [(hidden, n_in), (hidden,), (n_out, hidden), (n_out,)], loss, grad, init,
        optimum={"params": planted, "value": None, "noise_floor": NOISE_SIGMA**2},
        data={"X": X, "Y": Y, "seed": seed},
    )


def _mlp_forward(params, X):
    W1, b1, W2, b2 = params
    Hid = np.tanh(X @ W1.T + b1)
    return Hid, Hid @ W2.T + b2


def from_spec(spec: dict) -> Problem:
    """Build a problem from ``{"name": ..., **kwargs}`` as used in run configs."""
    spec = dict(spec)
    name = spec.pop("name")
    builders = {
        "quadratic": quadratic,
        "rosenbrock": rosenbrock,
        "logistic_regression": logistic_regression,
        "mlp_regression": mlp_regression,
    }
    if name not in builders:
        raise ValueError(f"unknown problem {name!r}; expected one of {sorted(builders)}")
    if name == "rosenbrock":
        spec.pop("seed", None)
    return builders[name](**spec)
