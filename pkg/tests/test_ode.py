from types import SimpleNamespace

import numpy as np
import pytest

from oracles import momentum_flow_closed_form
from subspace_descent import problems
from subspace_descent.hamiltonian import HamiltonianSpec
from subspace_descent.ode import (
    Frozen,
    OdeBlowUp,
    OdeState,
    OdeSystem,
    PcaGradientFlow,
    integrate,
    integrate_ensemble,
    lyapunov_violation,
    max_h_increase,
    random_start,
    roundoff_floor,
    stationarity_probe,
)
from subspace_descent.optimizers import ADAM, LION_K, MOMENTUM, SmoothL1
from subspace_descent.problems import Problem
from subspace_descent.trainer import CSV_COLUMNS


def _scalar_momentum(a, w0, m0, dissipative=True):
    q = problems.quadratic(1, 1, A=np.eye(1), W_star=np.zeros((1, 1)))
    y = OdeState(np.array([[w0]]), np.array([[m0]]))
    return OdeSystem(HamiltonianSpec(MOMENTUM, a=a), q, y, dissipative=dissipative)


def test_momentum_matches_closed_form():
    sys = _scalar_momentum(2.0, 1.0, 0.5)
    tr = integrate(sys, 1e-3, 1000)
    w, m = momentum_flow_closed_form(1.0, 0.5, 2.0, 1.0)
    assert abs(tr.final.W[0, 0] - w) <= 1e-6
    assert abs(tr.final.M[0, 0] - m) <= 1e-6


def _error(method, h):
    sys = _scalar_momentum(2.0, 1.0, 0.5)
    tr = integrate(sys, h, int(round(1.0 / h)), method=method, with_rate=False)
    w, _ = momentum_flow_closed_form(1.0, 0.5, 2.0, 1.0)
    return abs(tr.final.W[0, 0] - w)


def test_convergence_orders():
    e1, e2 = _error("euler", 1e-2), _error("euler", 5e-3)
    assert 1.8 < e1 / e2 < 2.2
    r1, r2 = _error("rk4", 1e-1), _error("rk4", 5e-2)
    assert 12 < r1 / r2 < 20


def test_conservative_momentum_conserves_h():
    def drift_of(h):
        sys = _scalar_momentum(1.5, 1.0, 0.0, dissipative=False)
        tr = integrate(sys, h, int(round(4.0 / h)))
        return abs(tr.H[-1] - tr.H[0])

    d1, d2 = drift_of(0.1), drift_of(0.05)
    assert d1 < 1e-3
    assert 10 < d1 / d2 < 40
    with pytest.raises(ValueError):
        q = problems.quadratic(2, 2)
        OdeSystem(HamiltonianSpec(ADAM), q, OdeState(np.zeros((2, 2)), np.zeros((2, 2)), np.ones((2, 2))),
                  dissipative=False)


def test_zero_gradient_state_is_constant():
    q = problems.quadratic(4, 3, seed=1)
    W = q.optimum["params"][0]
    for spec, V in [(HamiltonianSpec(MOMENTUM), None), (HamiltonianSpec(ADAM, b=0.5), np.ones((4, 3))),
                    (HamiltonianSpec(LION_K, b=0.3, K=SmoothL1()), None)]:
        tr = integrate(OdeSystem(spec, q, OdeState(W, np.zeros((4, 3)), V)), 1e-2, 50)
        np.testing.assert_array_equal(tr.final.W, W)
        assert np.all(tr.H == tr.H[0])


@pytest.mark.parametrize("family", [MOMENTUM, ADAM, LION_K])
def test_projected_flow_descends(family):
    q = problems.quadratic(8, 4, seed=2)
    spec = {MOMENTUM: HamiltonianSpec(MOMENTUM), ADAM: HamiltonianSpec(ADAM, b=0.5),
            LION_K: HamiltonianSpec(LION_K, b=0.5, K=SmoothL1())}[family]
    y = random_start(q, spec, 3, seed=4)
    tr = integrate(OdeSystem(spec, q, y, PcaGradientFlow()), 1e-3, 3000)
    assert lyapunov_violation(tr.H) == 0.0
    assert tr.loss[-1] < tr.loss[0]
    assert np.all(tr.dHdt <= 1e-12)
    assert tr.ortho[0] < 1e-12
    assert len(next(tr.rows())) == len(CSV_COLUMNS)


def test_ensemble_matches_single_runs():
    q = problems.quadratic(6, 3, seed=5)
    spec = HamiltonianSpec(ADAM, a=1.0, b=0.5)
    starts = [random_start(q, spec, 2, s) for s in range(3)]
    ens = integrate_ensemble(spec, q, starts, 1e-2, 200, gamma=PcaGradientFlow())
    for i, y in enumerate(starts):
        tr = integrate(OdeSystem(spec, q, y, PcaGradientFlow()), 1e-2, 200)
        np.testing.assert_allclose(ens.loss[i], tr.loss, rtol=1e-10, atol=1e-13)
        np.testing.assert_allclose(ens.H[i], tr.H, rtol=1e-10, atol=1e-13)
        np.testing.assert_allclose(ens.final.P[i], tr.final.P, rtol=1e-10, atol=1e-13)


def test_ensemble_requires_quadratic():
    spec = HamiltonianSpec(MOMENTUM)
    p = problems.rosenbrock()
    with pytest.raises(ValueError):
        integrate_ensemble(spec, p, [OdeState(np.zeros((1, 2)), np.zeros((1, 2)))], 1e-2, 1)


def test_blow_up_is_detected():
    grow = Problem("concave", [(2, 2)], lambda p: -0.5 * float(np.sum(p[0] ** 2)),
                   lambda p: [-p[0]], lambda s: [np.ones((2, 2))])
    sys = OdeSystem(HamiltonianSpec(MOMENTUM), grow, OdeState(np.ones((2, 2)), np.zeros((2, 2))))
    with pytest.raises(OdeBlowUp):
        integrate(sys, 0.1, 10000)


def test_bad_arguments():
    sys = _scalar_momentum(1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        integrate(sys, 0.0, 10)
    with pytest.raises(ValueError):
        integrate(sys, 0.1, 10, method="leapfrog")
    with pytest.raises(ValueError):
        OdeSystem(HamiltonianSpec(ADAM), sys.problem, OdeState(np.zeros((1, 1)), np.zeros((1, 1))))


def test_probe_at_minimizer_passes_immediately():
    q = problems.quadratic(4, 2, seed=6)
    y = OdeState(q.optimum["params"][0], np.zeros((2, 2)), None, np.eye(4)[:, :2])
    rep = stationarity_probe(OdeSystem(HamiltonianSpec(MOMENTUM), q, y, PcaGradientFlow()), 1e-2, 10.0)
    assert rep.reason == "equilibrium" and rep.steps == 0 and rep.passed


def test_frozen_degenerate_projection_stalls_away_from_stationarity():
    n, m, k = 6, 3, 2
    W_star = np.zeros((n, m))
    q = problems.quadratic(n, m, A=np.eye(n), W_star=W_star)
    W0 = np.zeros((n, m))
    W0[k:] = 1.0
    P = np.eye(n)[:, :k]
    y = OdeState(W0, np.zeros((k, m)), None, P)
    rep = stationarity_probe(OdeSystem(HamiltonianSpec(MOMENTUM), q, y, Frozen()), 1e-2, 50.0)
    assert rep.stalled and rep.reason == "equilibrium"
    assert rep.grad_norm > 1e-2 and not rep.passed


def test_probe_reports_time_limit():
    q = problems.quadratic(4, 2, seed=7)
    y = random_start(q, HamiltonianSpec(MOMENTUM), None, 0)
    rep = stationarity_probe(OdeSystem(HamiltonianSpec(MOMENTUM), q, y), 1e-2, 0.5)
    assert rep.reason == "t_max" and rep.steps == 50 and not rep.stalled


def test_random_start_shapes():
    q = problems.quadratic(7, 3)
    y = random_start(q, HamiltonianSpec(ADAM), 2, 0)
    assert y.M.shape == (2, 3) and y.V.shape == (2, 3) and y.P.shape == (7, 2)
    assert np.all(y.V > 0)
    np.testing.assert_allclose(y.P.T @ y.P, np.eye(2), atol=1e-12)
    y = random_start(q, HamiltonianSpec(MOMENTUM), None, 0)
    assert y.M.shape == (7, 3) and y.V is None and y.P is None


def test_violation_helpers():
    H = np.array([3.0, 2.0, 1.0])
    assert lyapunov_violation(H) == 0.0 and max_h_increase(SimpleNamespace(H=H)) == 0.0
    assert lyapunov_violation(np.array([1.0, 1.0 + 1e-15])) == 0.0
    assert lyapunov_violation(np.array([1.0, 1.5, 1.2])) == pytest.approx(0.5)
    assert roundoff_floor(np.array([1e-3])) == pytest.approx(64 * np.finfo(float).eps)
    batch = np.array([[2.0, 1.0], [1.0, 1.25]])
    assert lyapunov_violation(batch) == pytest.approx(0.25)

