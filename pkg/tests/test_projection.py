import json

import numpy as np
import pytest

from oracles import central_diff, pca_loss_direct
from subspace_descent.matrix import ShapeError
from subspace_descent.optimizers import adam, gd
from subspace_descent.projection import (
    LinearOperator,
    PeriodicSVD,
    ProjectionState,
    Static,
    ZeroGradientError,
    init_projection,
    online_pca_state,
    operator_adjoint,
    operator_apply,
    orthodefect,
    pca_loss,
    pca_loss_grad,
    projection_update_online_pca,
    projection_update_periodic_svd,
    update_projection,
)
from subspace_descent.svd import principal_angles, svd, tail_energy, top_k_left

E1 = np.array([[1.0], [0.0]])


def run_online_pca(P, G, steps, lr, kind=None, lam=0.1, alpha=1.0):
    ps = online_pca_state(P, kind or gd(), lam=lam, alpha=alpha)
    for _ in range(steps):
        ps = projection_update_online_pca(ps, G, lr)
    return ps


def test_loss_examples():
    assert pca_loss(E1, E1, 0.1) == pytest.approx(0.0, abs=1e-15)
    G = np.random.default_rng(0).standard_normal((5, 2))
    assert pca_loss(np.zeros((5, 3)), G, 0.1) == pytest.approx(1 + 0.1 * 3, rel=1e-14)


def test_loss_matches_direct_formula():
    rng = np.random.default_rng(1)
    P, G = rng.standard_normal((8, 3)), rng.standard_normal((8, 5))
    assert pca_loss(P, G, 0.1) == pytest.approx(pca_loss_direct(P, G, 0.1), rel=1e-12)


def test_loss_is_scale_invariant_in_G():
    rng = np.random.default_rng(2)
    P, G = rng.standard_normal((6, 2)), rng.standard_normal((6, 4))
    assert pca_loss(P, 1e3 * G, 0.3) == pytest.approx(pca_loss(P, G, 0.3), rel=1e-12)


def test_loss_when_span_contains_G():
    rng = np.random.default_rng(3)
    P = rng.standard_normal((6, 3))
    Q, _ = np.linalg.qr(P)
    G = Q @ rng.standard_normal((3, 4))
    # Orthonormalised P reproduces G exactly, so only the penalty remains (zero).
    assert pca_loss(Q, G, 0.1) == pytest.approx(0.0, abs=1e-14)


def test_zero_gradient_rejected():
    with pytest.raises(ZeroGradientError):
        pca_loss(E1, np.zeros((2, 1)), 0.1)
    with pytest.raises(ZeroGradientError):
        pca_loss_grad(E1, np.zeros((2, 1)), 0.1)


def test_shape_checks():
    with pytest.raises(ShapeError):
        pca_loss(np.ones((3, 1)), np.ones((4, 2)), 0.1)
    with pytest.raises(ShapeError):
        pca_loss(np.ones((2, 3)), np.ones((2, 2)), 0.1)   # k > n


def test_grad_zero_at_minimizer():
    np.testing.assert_allclose(pca_loss_grad(E1, E1, 0.7), 0.0, atol=1e-15)


@pytest.mark.parametrize("shape", [(8, 2, 5), (12, 4, 3)])
def test_grad_matches_finite_differences(shape):
    n, k, m = shape
    rng = np.random.default_rng(n)
    for _ in range(5):
        P, G, lam = rng.standard_normal((n, k)), rng.standard_normal((n, m)), rng.uniform(0, 1)
        fd = central_diff(lambda X: pca_loss(X, G, lam), P)
        an = pca_loss_grad(P, G, lam)
        assert np.linalg.norm(an - fd) <= 1e-5 * np.linalg.norm(fd)


def test_grad_zero_on_top_subspace_without_penalty():
    G = np.random.default_rng(4).standard_normal((10, 6))
    P = top_k_left(G, 3)
    assert np.linalg.norm(pca_loss_grad(P, G, 0.0)) <= 1e-12


def test_online_update_fixed_point():
    P = np.eye(4)[:, :2]
    G = np.zeros((4, 3))
    G[0, 0], G[1, 2] = 2.0, -1.0
    for kind in (adam(), gd()):
        out = projection_update_online_pca(online_pca_state(P, kind, lam=0.1), G, 0.1)
        np.testing.assert_array_equal(out.P, P)
        assert out.step == 1 and out.updater.opt_state.t == 1


def test_online_update_learning_rate_is_alpha_times_eps():
    rng = np.random.default_rng(6)
    P, G = rng.standard_normal((5, 2)), rng.standard_normal((5, 3))
    ps = online_pca_state(P, gd(), lam=0.1, alpha=5.0)
    out = projection_update_online_pca(ps, G, 0.01, weight_decay_P=0.2)
    expected = P + 5.0 * 0.01 * (-pca_loss_grad(P, G, 0.1) - 0.2 * P)
    np.testing.assert_allclose(out.P, expected, rtol=1e-14)


def rank_k_matrix(rng, n, m, k, spread=(2.0, 1.0)):
    U, _ = np.linalg.qr(rng.standard_normal((n, k)))
    V, _ = np.linalg.qr(rng.standard_normal((m, k)))
    s = np.linspace(spread[0], spread[1], k)
    return (U * s) @ V.T, U


def test_online_pca_recovers_rank_two_subspace():
    rng = np.random.default_rng(7)
    G, U = rank_k_matrix(rng, 16, 8, 2)
    ps = run_online_pca(init_projection(16, 2, 7), G, 2000, 0.1)
    assert np.max(principal_angles(ps.P, U)) <= 1e-3
    assert orthodefect(ps.P) <= 1e-3


def test_converged_loss_is_optimal_rank_k_residual():
    rng = np.random.default_rng(8)
    G = rng.standard_normal((20, 10)) * np.linspace(3, 0.3, 10)
    k = 3
    ps = run_online_pca(init_projection(20, k, 8), G, 20000, 0.2)
    optimal = (tail_energy(G, k) / np.linalg.norm(G)) ** 2
    assert abs(pca_loss(ps.P, G, 0.1) - optimal) <= 1e-4
    assert orthodefect(ps.P) <= 1e-3


@pytest.mark.parametrize("kind", [adam(), gd()], ids=["adam", "sgd"])
def test_degenerate_start_escapes(kind):
    """P orthogonal to col(G) but otherwise generic does not stay orthogonal."""
    escaped = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        G = rng.standard_normal((12, 4))
        Q, _ = np.linalg.qr(G)
        P = rng.standard_normal((12, 3))
        P -= Q @ (Q.T @ P)
        ps = online_pca_state(P, kind, lam=0.1, alpha=5.0)
        for _ in range(1500):
            ps = update_projection(ps, G, 0.01)
            if np.linalg.norm(ps.P.T @ G) > 1e-6 * np.linalg.norm(G):
                escaped += 1
                break
    assert escaped >= 99


def test_periodic_svd_refreshes_only_on_period():
    rng = np.random.default_rng(9)
    P0 = init_projection(6, 2, 0)
    ps = ProjectionState(P0, PeriodicSVD(200), step=1)
    for _ in range(199):
        ps = projection_update_periodic_svd(ps, rng.standard_normal((6, 4)))
        np.testing.assert_array_equal(ps.P, P0)
    assert ps.step == 200
    G = rng.standard_normal((6, 4))
    ps = projection_update_periodic_svd(ps, G)
    np.testing.assert_allclose(ps.P, top_k_left(G, 2))


def test_periodic_svd_diagonal():
    ps = projection_update_periodic_svd(ProjectionState(np.eye(3)[:, [2, 1]], PeriodicSVD(5)),
                                        np.diag([3.0, 2.0, 1.0]))
    np.testing.assert_allclose(np.abs(ps.P), np.eye(3)[:, :2], atol=1e-15)


def test_periodic_svd_eckart_young():
    G = np.random.default_rng(10).standard_normal((12, 7))
    ps = projection_update_periodic_svd(ProjectionState(init_projection(12, 3, 1), PeriodicSVD(200)), G)
    s = np.linalg.svd(G, compute_uv=False)
    resid = np.linalg.norm(ps.P @ ps.P.T @ G - G)
    assert resid == pytest.approx(np.sqrt(np.sum(s[3:] ** 2)), rel=1e-10)


def test_static_and_zero_gradient_leave_P_alone():
    P = init_projection(5, 2, 3)
    ps = update_projection(ProjectionState(P, Static()), np.ones((5, 2)), 0.1)
    np.testing.assert_array_equal(ps.P, P)
    assert ps.step == 1
    ps = update_projection(online_pca_state(P, adam()), np.zeros((5, 2)), 0.1)
    np.testing.assert_array_equal(ps.P, P)
    assert ps.updater.opt_state.t == 0


def test_init_projection():
    Q = init_projection(7, 7, 0)
    assert np.linalg.norm(Q.T @ Q - np.eye(7)) <= 1e-12
    np.testing.assert_array_equal(init_projection(9, 3, 42), init_projection(9, 3, 42))
    P = init_projection(100, 10, 1)
    assert orthodefect(P) <= 1e-12
    with pytest.raises(ValueError):
        init_projection(3, 4, 0)


def test_projection_state_validation():
    with pytest.raises(ShapeError):
        online_pca_state(np.ones((2, 3)), adam())
    with pytest.raises(ValueError):
        online_pca_state(init_projection(4, 2), adam(), alpha=0.0)
    with pytest.raises(ValueError):
        online_pca_state(init_projection(4, 2), adam(), lam=-1.0)
    with pytest.raises(ValueError):
        PeriodicSVD(0)


def test_projection_state_json_roundtrip():
    rng = np.random.default_rng(11)
    ps = online_pca_state(init_projection(6, 2, 0), adam(), lam=0.2, alpha=3.0)
    for _ in range(3):
        ps = update_projection(ps, rng.standard_normal((6, 3)), 0.01)
    back = ProjectionState.from_dict(json.loads(json.dumps(ps.to_dict())))
    G = rng.standard_normal((6, 3))
    np.testing.assert_array_equal(update_projection(ps, G, 0.01).P, update_projection(back, G, 0.01).P)
    for upd in (PeriodicSVD(7), Static()):
        s = ProjectionState(init_projection(4, 2), upd, 3)
        b = ProjectionState.from_dict(json.loads(json.dumps(s.to_dict())))
        assert b.updater == upd and b.step == 3


def test_operator_examples():
    rng = np.random.default_rng(12)
    X = rng.standard_normal((4, 3))
    op = LinearOperator("left", np.eye(4))
    np.testing.assert_array_equal(operator_apply(op, X), X)
    np.testing.assert_array_equal(operator_adjoint(op, X), X)
    z = LinearOperator("sum_sided", np.zeros((4, 4)), np.zeros((3, 3)))
    np.testing.assert_array_equal(operator_apply(z, X), 0.0)
    np.testing.assert_array_equal(operator_adjoint(z, X), 0.0)


def test_two_sided_adjoint():
    rng = np.random.default_rng(13)
    op = LinearOperator("two_sided", rng.standard_normal((4, 2)), rng.standard_normal((5, 3)))
    for _ in range(20):
        X, Y = rng.standard_normal((4, 3)), rng.standard_normal((2, 5))
        lhs = np.vdot(operator_adjoint(op, X), Y)
        rhs = np.vdot(X, operator_apply(op, Y))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_operator_shape_errors():
    with pytest.raises(ShapeError):
        LinearOperator("sum_sided", np.ones((3, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        LinearOperator("diagonal", np.ones((3, 3)))
    op = LinearOperator("left", np.ones((3, 2)))
    with pytest.raises(ShapeError):
        operator_apply(op, np.ones((3, 3)))
