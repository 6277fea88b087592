import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from oracles import conjugate_gradient, fd_gradient, lasso_coordinate_descent, lasso_objective, max_rel_err
from stosca.nn_core import MiniBatch, MlpModel, Topology, batch_gradient, predict
from stosca.objective import L1, L2, ElasticNet, GroupSparse, LossKind, Manifold, build_knn_graph
from stosca.sca_engine import ScaConfig, build_surrogate
from stosca.surrogate import (
    LogisticSurrogate,
    RidgeSurrogate,
    SparseSurrogate,
    SurrogateError,
    build_ridge,
    linearize_model,
    manifold_factor,
    manifold_surrogate_value,
    power_iteration,
    prox_gradient_norm,
    solve,
    solve_l1_fista,
    solve_logistic,
    solve_ridge,
)


def random_psd(rng, Q, rank=None):
    G = rng.standard_normal((rank or Q, Q))
    return G.T @ G / (rank or Q)


# -- linearization -----------------------------------------------------------


def test_linearization_anchor_and_taylor_ratio(rng):
    top = Topology.parse("4/6/1")
    m = MlpModel(top, rng.standard_normal(top.n_params))
    X = rng.uniform(-1, 1, (5, 4))
    b = MiniBatch.from_arrays(X, np.zeros(5))
    f, J = linearize_model(m, b)
    np.testing.assert_array_equal(f, predict(m, X))
    v = rng.standard_normal(top.n_params)
    errs = []
    for h in (1e-2, 5e-3):
        exact = predict(m.with_weights(m.w + h * v), X)
        errs.append(np.abs(exact - (f + h * J @ v)))
    ratio = errs[0] / errs[1]
    assert np.all((ratio > 3.5) & (ratio < 4.5))


def test_linearization_exact_for_affine_model(rng):
    m = MlpModel(Topology.parse("3/1"), rng.standard_normal(4))
    X = rng.uniform(-1, 1, (4, 3))
    f, J = linearize_model(m, MiniBatch.from_arrays(X, np.zeros(4)))
    w = rng.standard_normal(4)
    np.testing.assert_allclose(f + J @ (w - m.w), predict(m.with_weights(w), X), rtol=1e-13, atol=1e-14)


# -- ridge surrogate -----------------------------------------------------------


def test_build_ridge_zero_jacobian_and_rho_one(rng):
    d = rng.standard_normal(3)
    s = build_ridge(np.zeros((2, 3)), rng.standard_normal(2), rng.standard_normal(2), d, 0.4, 0.1, 0.0, rng.standard_normal(3))
    np.testing.assert_array_equal(s.A, 0.0)
    np.testing.assert_allclose(s.b, -0.3 * d)
    J, f, y, w_n = rng.standard_normal((2, 3)), rng.standard_normal(2), rng.standard_normal(2), rng.standard_normal(3)
    s1 = build_ridge(J, f, y, d, 1.0, 0.1, 0.0, w_n)
    s2 = build_ridge(J, f, y, 100 * d, 1.0, 0.1, 0.0, w_n)
    np.testing.assert_array_equal(s1.b, s2.b)


def test_build_ridge_matches_loops(rng):
    L, Q, rho = 2, 2, 0.7
    J, f, y = rng.standard_normal((L, Q)), rng.standard_normal(L), rng.standard_normal(L)
    d, w_n = rng.standard_normal(Q), rng.standard_normal(Q)
    s = build_ridge(J, f, y, d, rho, 0.01, 0.0, w_n)
    A = np.zeros((Q, Q))
    b = np.zeros(Q)
    for i in range(L):
        r = y[i] - f[i] + sum(J[i, q] * w_n[q] for q in range(Q))
        for p in range(Q):
            b[p] += rho / L * J[i, p] * r
            for q in range(Q):
                A[p, q] += rho / L * J[i, p] * J[i, q]
    b -= (1 - rho) / 2 * d
    np.testing.assert_allclose(s.A, A, rtol=1e-14)
    np.testing.assert_allclose(s.b, b, rtol=1e-14)


def test_outer_product_two_ways(rng):
    J = rng.standard_normal((7, 12))
    s = build_ridge(J, np.zeros(7), np.zeros(7), np.zeros(12), 0.8, 0.1, 0.0, np.zeros(12))
    A = np.zeros((12, 12))
    for row in J:
        A += np.outer(row, row)
    np.testing.assert_allclose(s.A, 0.8 / 7 * A, rtol=1e-12, atol=1e-14)


def test_ridge_requires_strong_convexity():
    with pytest.raises(SurrogateError, match="not strongly convex"):
        build_ridge(np.ones((1, 2)), [0.0], [0.0], np.zeros(2), 0.5, 0.0, 0.0, np.zeros(2))


def test_solve_ridge_examples():
    s = RidgeSurrogate(np.array([3.0]), 1.0, 0.0, np.zeros(1), dense=np.array([[2.0]]))
    np.testing.assert_allclose(solve_ridge(s), [1.0])
    b = np.array([1.0, -2.0, 0.5])
    s = RidgeSurrogate(b, 0.25, 0.0, np.zeros(3), dense=np.zeros((3, 3)))
    np.testing.assert_allclose(solve_ridge(s), b / 0.25, rtol=1e-15)


@pytest.mark.parametrize("Q,rows", [(30, None), (200, None), (120, 10)])
def test_solve_ridge_matches_cg(rng, Q, rows):
    b, w_n = rng.standard_normal(Q), rng.standard_normal(Q)
    lam, tau = 1e-2, 0.05
    if rows is None:
        A = random_psd(rng, Q)
        s = RidgeSurrogate(b, lam, tau, w_n, dense=A)
    else:
        H = rng.standard_normal((rows, Q))
        A = H.T @ H
        s = RidgeSurrogate(b, lam, tau, w_n, factor=H)  # low-rank path
    ref = conjugate_gradient(A + (lam + tau) * np.eye(Q), b + tau * w_n, tol=1e-12)
    assert np.max(np.abs(solve_ridge(s) - ref)) < 1e-8


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), lam=st.floats(1e-3, 1.0), tau=st.floats(0.0, 1.0))
def test_ridge_strong_convexity_and_descent(seed, lam, tau):
    rng = np.random.default_rng(seed)
    Q = 8
    H = rng.standard_normal((3, Q))
    s = RidgeSurrogate(rng.standard_normal(Q), lam, tau, rng.standard_normal(Q), factor=H)
    w, v = rng.standard_normal(Q), rng.standard_normal(Q)
    v /= np.linalg.norm(v)
    h = 0.1
    second = (s.objective(w + h * v) - 2 * s.objective(w) + s.objective(w - h * v)) / h**2
    assert second >= 2 * (lam + tau) - 1e-6
    w_hat = solve_ridge(s)
    assert s.objective(w_hat) <= s.objective(s.w_n)
    assert np.linalg.norm(s.gradient(w_hat)) < 1e-8 * (1 + np.linalg.norm(s.b))


# -- l1 / group FISTA -----------------------------------------------------------


def test_fista_scalar_examples():
    A, b, w_n = np.array([[1.0]]), np.array([1.0]), np.zeros(1)
    np.testing.assert_array_equal(solve_l1_fista(A, b, w_n, 3.0), [0.0])
    np.testing.assert_allclose(solve_l1_fista(A, b, w_n, 1.0), [0.5], atol=1e-10)


def test_fista_lambda_zero_matches_ridge(rng):
    Q = 10
    A, b, w_n = random_psd(rng, Q, 4), rng.standard_normal(Q), rng.standard_normal(Q)
    tau = 0.1
    ref = solve_ridge(RidgeSurrogate(b, 0.0, tau, w_n, dense=A))
    np.testing.assert_allclose(solve_l1_fista(A, b, w_n, 0.0, tau), ref, atol=1e-8)


def test_fista_rejects_non_psd(rng):
    A = np.diag([1.0, -2.0, 0.5])
    with pytest.raises(SurrogateError, match="positive semidefinite"):
        solve_l1_fista(A, np.ones(3), np.zeros(3), 0.1)
    with pytest.raises(SurrogateError):
        power_iteration(np.array([[0.0, 1.0], [1.0, 0.0]]) - 0.5 * np.eye(2))


@pytest.mark.parametrize("Q", [5, 20, 50])
def test_fista_matches_coordinate_descent(rng, Q):
    A, b, w_n = random_psd(rng, Q, max(2, Q // 3)), rng.standard_normal(Q), rng.standard_normal(Q)
    lam, tau = 2.0, 0.05
    w = solve_l1_fista(A, b, w_n, lam, tau, tol=1e-13, max_iter=200000)
    ref = lasso_coordinate_descent(A, b, w_n, lam, tau)
    assert lasso_objective(A, b, w_n, lam, tau, w) - lasso_objective(A, b, w_n, lam, tau, ref) < 1e-8
    zeros = w == 0.0
    assert zeros.any()
    g = 2 * ((A + tau * np.eye(Q)) @ w - b - tau * w_n)
    assert np.all(np.abs(g[zeros]) <= lam + 1e-6)
    assert np.allclose(g[~zeros], -lam * np.sign(w[~zeros]), atol=1e-6)


def test_group_fista_block_optimality(rng):
    Q = 12
    groups = [np.arange(0, 3), np.arange(3, 7), np.arange(7, 12)]
    A, b, w_n = random_psd(rng, Q, 5), 0.5 * rng.standard_normal(Q), rng.standard_normal(Q)
    lam, tau = 1.5, 0.05
    w = solve_l1_fista(A, b, w_n, lam, tau, groups=groups, tol=1e-13, max_iter=100000)
    g = 2 * ((A + tau * np.eye(Q)) @ w - b - tau * w_n)
    hit = False
    for grp in groups:
        a = np.sqrt(grp.size)
        if not w[grp].any():
            hit = True
            assert np.linalg.norm(g[grp]) <= lam * a + 1e-6
        else:
            np.testing.assert_allclose(g[grp], -lam * a * w[grp] / np.linalg.norm(w[grp]), atol=1e-6)
    assert hit


def test_sparse_surrogate_elastic_net_vs_oracle(rng):
    Q = 15
    H = rng.standard_normal((4, Q))
    b, w_n = rng.standard_normal(Q), rng.standard_normal(Q)
    reg = ElasticNet(0.6, 0.5)
    quad = RidgeSurrogate(b, reg.lam * reg.ridge_weight, 0.05, w_n, factor=H)
    w = solve(SparseSurrogate(quad, reg))
    # fold the ridge share into the quadratic and reuse the lasso oracle
    A = H.T @ H + quad.lam * np.eye(Q)
    ref = lasso_coordinate_descent(A, b, w_n, reg.lam * reg.mix, 0.05)
    obj = SparseSurrogate(quad, reg).objective
    assert obj(w) - obj(ref) < 1e-8


# -- logistic surrogate ----------------------------------------------------------


def _logistic(rng, L=8, Q=6, variant="l2", lam=0.05, tau=0.02, rho=0.6):
    return LogisticSurrogate(
        rng.standard_normal(L), rng.standard_normal((L, Q)), rng.integers(0, 2, L).astype(float),
        rho, lam, tau, rng.standard_normal(Q), rng.standard_normal(Q), variant,
    )


def test_logistic_symmetric_batch_gives_zero(rng):
    j = rng.standard_normal((2, 5))
    JL = np.vstack([j, j, -j, -j])
    y = np.array([1, 1, 0, 0, 1, 1, 0, 0], float)
    s = LogisticSurrogate(np.zeros(8), JL, y, 0.7, 0.1, 0.0, np.zeros(5), np.zeros(5))
    np.testing.assert_allclose(solve_logistic(s), 0.0, atol=1e-12)


def test_logistic_zero_jacobian_reduces_to_ridge(rng):
    Q, rho, lam, tau = 5, 0.6, 0.2, 0.1
    d, w_n = rng.standard_normal(Q), rng.standard_normal(Q)
    s = LogisticSurrogate(rng.standard_normal(4), np.zeros((4, Q)), np.array([0, 1, 1, 0.0]), rho, lam, tau, d, w_n)
    # the l2 penalty enters as lam/2 ||w||^2, the ridge convention as lam ||w||^2
    ridge = build_ridge(np.zeros((4, Q)), np.zeros(4), np.zeros(4), d, rho, lam / 2, tau, w_n)
    np.testing.assert_allclose(solve_logistic(s), solve_ridge(ridge), rtol=1e-10, atol=1e-12)


def test_logistic_matches_generic_optimiser(rng):
    s = _logistic(rng)
    w = solve_logistic(s)
    ref = minimize(s.objective, s.w_n, jac=s.smooth_gradient, method="BFGS", options={"gtol": 1e-12}).x
    np.testing.assert_allclose(w, ref, atol=1e-6)
    f0 = s.objective(w)
    for _ in range(1000):
        assert f0 <= s.objective(w + 1e-3 * rng.standard_normal(w.size))


def test_logistic_l1_optimality(rng):
    s = _logistic(rng, variant="l1", lam=0.3, tau=0.05)
    w = solve_logistic(s)
    assert prox_gradient_norm(s, w) < 1e-6
    assert (w == 0).any()
    f0 = s.objective(w)
    for _ in range(1000):
        assert f0 <= s.objective(w + 1e-3 * rng.standard_normal(w.size)) + 1e-12


def test_logistic_gradient_finite_differences(rng):
    s = _logistic(rng)
    w = rng.standard_normal(6)
    assert max_rel_err(s.smooth_gradient(w), fd_gradient(s.smooth_value, w)) < 1e-5


def test_logistic_requires_strong_convexity(rng):
    s = _logistic(rng, variant="l1", lam=0.1, tau=0.0)
    with pytest.raises(SurrogateError):
        solve_logistic(s)


# -- manifold terms ----------------------------------------------------------------


def _manifold(rng, lam=0.3):
    top = Topology.parse("3/5/1")
    X = rng.uniform(-0.5, 0.5, (15, 3))
    return MlpModel(top, rng.standard_normal(top.n_params)), Manifold(lam, build_knn_graph(X, 3), X), X


def test_manifold_identical_pair_contributes_nothing(rng):
    m, _, _ = _manifold(rng)
    X = np.array([[0.1, 0.2, 0.3], [0.1, 0.2, 0.3], [0.4, -0.2, 0.0]])
    man = Manifold(1.0, build_knn_graph(X, 1), X)
    H, t = manifold_factor(m, MiniBatch.from_arrays(X[:2], np.zeros(2), [0, 1]), man)
    np.testing.assert_array_equal(H, 0.0)
    np.testing.assert_array_equal(t, 0.0)


def test_manifold_anchor_and_gradient(rng):
    m, man, X = _manifold(rng)
    full = MiniBatch.from_arrays(X, np.zeros(15), np.arange(15))
    H, t = manifold_factor(m, full, man)
    assert manifold_surrogate_value(H, t, m.w) == pytest.approx(man.value(m.w, m), rel=1e-12)
    grad = -2 * H.T @ (t - H @ m.w)
    fd = fd_gradient(lambda v: man.value(v, m), m.w)
    assert max_rel_err(grad, fd) < 1e-5


def test_manifold_missing_neighbour_data(rng):
    m, man, X = _manifold(rng)
    with pytest.raises(SurrogateError, match="missing"):
        manifold_factor(m, MiniBatch.from_arrays(X[:2], np.zeros(2), [0, 99]), man)


# -- first-order matching through the engine's builder ------------------------------


CASES = [
    ("squared", L2(1e-2), False),
    ("squared", L1(1e-2), False),
    ("squared", GroupSparse(1e-2, tuple(Topology.parse("3/5/1").neuron_groups()), n_params=26), False),
    ("cross_entropy", L2(1e-2), False),
    ("cross_entropy", L1(1e-2), False),
    ("squared", L2(1e-2), True),
    ("cross_entropy", L2(1e-2), True),
]


@pytest.mark.parametrize("loss,reg,with_manifold", CASES)
def test_surrogate_first_order_matching(rng, loss, reg, with_manifold):
    top = Topology.parse("3/5/1")
    loss = LossKind.parse(loss)
    X = rng.uniform(-0.5, 0.5, (30, 3))
    man = Manifold(0.2, build_knn_graph(X, 3), X) if with_manifold else None
    for _ in range(10):
        m = MlpModel(top, rng.standard_normal(top.n_params), head=loss.head)
        idx = rng.choice(30, 6, replace=False)
        y = rng.integers(0, 2, 6).astype(float)
        b = MiniBatch(idx, X[idx], y)
        d, rho = rng.standard_normal(top.n_params), rng.uniform(0.05, 1.0)
        cfg = ScaConfig(loss=loss, reg=reg, tau=0.05)
        s, grad = build_surrogate(m, b, d, rho, cfg, man, n_train=30)
        g = batch_gradient(m, b, loss)
        np.testing.assert_allclose(grad, g, rtol=1e-10, atol=1e-13)
        expected = rho * g + (1 - rho) * d
        if man is not None:
            expected = expected + man.lam * (30 / 6) * man.gradient(m.w, m, idx)
        if isinstance(s, LogisticSurrogate):
            # the proximal term has zero gradient at w_n; drop the l2 penalty part
            got = s.smooth_gradient(m.w) - (s.lam * m.w if s.reg_variant == "l2" else 0.0)
        else:
            got = s.loss_gradient(m.w)
        np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12)
