import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onsetclust import evalkit, ticc
from onsetclust.core import InputError
from onsetclust.ticc import ClusterModel, GlassoConfig

from oracles import grid_argmin_l1_quadratic, mvn_logpdf_cov, two_pass_stats


def _spd(rng, n, cond=5.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * np.linspace(1.0, cond, n)) @ Q.T


def test_stack_windows_examples():
    z = np.arange(10, dtype=float).reshape(5, 2)
    np.testing.assert_array_equal(ticc.stack_windows(z, 1), z)
    W = ticc.stack_windows(z, 2)
    assert W.shape == (4, 4)
    np.testing.assert_array_equal(W[0], [0, 1, 2, 3])
    with pytest.raises(InputError):
        ticc.stack_windows(z, 6)


@settings(max_examples=40, deadline=None)
@given(P=st.integers(1, 20), C=st.integers(1, 4), omega=st.integers(1, 5), seed=st.integers(0, 999))
def test_unstack_recovers_rows(P, C, omega, seed):
    if omega > P:
        return
    z = np.random.default_rng(seed).random((P, C))
    np.testing.assert_array_equal(ticc.unstack_windows(ticc.stack_windows(z, omega), omega, C), z)


def test_empirical_stats_examples():
    w = np.array([1.0, -2.0, 0.5])
    mu, S = ticc.empirical_stats(w[None])
    np.testing.assert_array_equal(mu, w)
    np.testing.assert_allclose(S, ticc.RIDGE * np.eye(3))
    mu, S = ticc.empirical_stats(np.stack([w, -w]))
    np.testing.assert_allclose(mu, 0, atol=1e-15)
    np.testing.assert_allclose(S, np.outer(w, w) + ticc.RIDGE * np.eye(3), atol=1e-15)
    with pytest.raises(ticc.EmptyCluster):
        ticc.empirical_stats(np.zeros((0, 3)))


def test_empirical_stats_two_pass_oracle():
    W = np.random.default_rng(0).standard_normal((30, 4)) + 3.0
    mu, S = ticc.empirical_stats(W)
    mo, So = two_pass_stats(W, ticc.RIDGE)
    np.testing.assert_allclose(mu, mo, atol=1e-10)
    np.testing.assert_allclose(S, So, atol=1e-10)


@pytest.mark.parametrize("a,t,expected", [(3, 1, 2), (-0.5, 1, 0), (-2.5, 1, -1.5)])
def test_soft_threshold(a, t, expected):
    assert ticc.soft_threshold(a, t) == expected


def test_theta_update_closed_forms():
    got = ticc.theta_update(np.array([[1.0]]), np.zeros((1, 1)), np.zeros((1, 1)), 1.0)
    assert abs(got[0, 0] - (-1 + math.sqrt(5)) / 2) < 1e-10
    got = ticc.theta_update(np.zeros((3, 3)), np.eye(3), np.zeros((3, 3)), 1.0)
    np.testing.assert_allclose(got, (1 + math.sqrt(5)) / 2 * np.eye(3), atol=1e-12)


def test_theta_update_first_order_optimality():
    rng = np.random.default_rng(1)
    for _ in range(10):
        S = _spd(rng, 3)
        A = rng.standard_normal((3, 3))
        Zc = A + A.T
        B = rng.standard_normal((3, 3))
        U = 0.1 * (B + B.T)
        rho = float(rng.uniform(0.5, 3))
        T = ticc.theta_update(S, Zc, U, rho)
        grad = -np.linalg.inv(T) + S + rho * (T - Zc + U)
        assert np.linalg.norm(grad) < 1e-8
        np.linalg.cholesky(T)


def test_toeplitz_prox_examples():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((3, 3))
    A = A + A.T
    np.testing.assert_allclose(ticc.toeplitz_prox(A, 0.0, 1.0, 1, 3), A)
    out = ticc.toeplitz_prox(np.array([[1.0, 0], [0, 3]]), 0.0, 1.0, 2, 1)
    np.testing.assert_allclose(out, [[2, 0], [0, 2]])


def test_toeplitz_prox_grid_oracle():
    rng = np.random.default_rng(3)
    omega, C, rho = 3, 2, 1.3
    n = omega * C
    A = rng.standard_normal((n, n))
    A = A + A.T
    lam = 0.4
    Z = ticc.toeplitz_prox(A, lam, rho, omega, C)
    ids, _ = ticc.toeplitz_classes(omega, C)
    for cls in np.unique(ids):
        members = A[ids == cls]
        z = grid_argmin_l1_quadratic(members, lam * members.size, rho)
        assert np.all(np.abs(Z[ids == cls] - z) < 1e-6)


@settings(max_examples=30, deadline=None)
@given(omega=st.integers(1, 4), C=st.integers(1, 3), seed=st.integers(0, 999))
def test_toeplitz_prox_projection_idempotent(omega, C, seed):
    n = omega * C
    A = np.random.default_rng(seed).standard_normal((n, n))
    A = A + A.T
    once = ticc.toeplitz_prox(A, 0.0, 1.0, omega, C)
    np.testing.assert_allclose(ticc.toeplitz_prox(once, 0.0, 1.0, omega, C), once, atol=1e-14)
    assert ticc.is_block_toeplitz(once, omega, C)
    np.testing.assert_array_equal(once, once.T)


def test_glasso_zero_lambda_recovers_inverse():
    rng = np.random.default_rng(4)
    for _ in range(5):
        S = _spd(rng, 4)
        Z, converged, _, _ = ticc.solve_toeplitz_glasso(S, GlassoConfig(lam=0.0), 1, 4)
        inv = np.linalg.inv(S)
        assert converged
        assert np.linalg.norm(Z - inv) / np.linalg.norm(inv) < 1e-4


def test_glasso_large_lambda_is_diagonal():
    S = _spd(np.random.default_rng(5), 4)
    Z, _, _, _ = ticc.solve_toeplitz_glasso(S, GlassoConfig(lam=1e3), 1, 4)
    assert np.all(Z[~np.eye(4, dtype=bool)] == 0)
    assert np.all(np.diag(Z) > 0)


def test_glasso_objective_monotone_tail():
    rng = np.random.default_rng(6)
    for _ in range(10):
        omega, C = 2, 2
        W = rng.standard_normal((200, omega * C))
        _, S = ticc.empirical_stats(W)
        cfg = GlassoConfig(lam=0.05)
        _, _, _, trace = ticc.solve_toeplitz_glasso(S, cfg, omega, C)
        tail = np.diff(trace[5:])
        assert np.all(tail <= 1e-8)


def test_fit_cluster_invariants_and_support():
    P_true = evalkit.tridiagonal(4, 2.0, 0.6)
    spec = evalkit.SyntheticSpec(K=1, omega_true=1, C=4, precisions=[P_true],
                                 segment_lengths=[(0, 5000)], seed=0)
    X, _, _ = evalkit.generate_synthetic(spec)
    m = ticc.fit_cluster(X, GlassoConfig(lam=0.05), 1, 4)
    assert m.converged
    np.testing.assert_allclose(m.theta, m.theta.T, atol=1e-9)
    np.linalg.cholesky(m.theta)
    support = np.abs(m.theta) > ticc.SUPPORT_TOL
    assert np.array_equal(support, P_true != 0)


def test_fit_cluster_block_toeplitz_omega3():
    X = np.random.default_rng(7).standard_normal((400, 6))
    m = ticc.fit_cluster(X, GlassoConfig(lam=0.02), 3, 2)
    assert m.converged and ticc.is_block_toeplitz(m.theta, 3, 2)
    np.linalg.cholesky(m.theta)


def test_log_likelihood_examples():
    m = ClusterModel(np.eye(1), np.zeros(1), 0.0, 1, 1, 1)
    assert ticc.log_likelihood(np.zeros(1), m) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert ticc.log_likelihood(np.ones(1), m) == pytest.approx(-0.5 - 0.5 * math.log(2 * math.pi), abs=1e-12)


def test_log_likelihood_covariance_oracle():
    rng = np.random.default_rng(8)
    theta = _spd(rng, 4)
    mu = rng.standard_normal(4)
    m = ClusterModel(theta, mu, float(np.linalg.slogdet(theta)[1]), 1, 1, 4)
    for _ in range(5):
        w = rng.standard_normal(4)
        assert abs(ticc.log_likelihood(w, m) - mvn_logpdf_cov(w, mu, np.linalg.inv(theta))) < 1e-9


def test_save_model_outputs(tmp_path):
    X = np.random.default_rng(9).standard_normal((100, 2))
    m = ticc.fit_cluster(X, GlassoConfig(lam=0.1), 1, 2)
    ticc.save_model(m, tmp_path / "c0_theta.bin", 0.1, ["a", "b"])
    man = json.loads((tmp_path / "c0_theta_manifest.json").read_text())
    assert {"omega", "C", "lambda", "converged", "n_assigned"} <= set(man)
    adj = json.loads((tmp_path / "c0_theta_A0_adjacency.json").read_text())
    assert adj["channels"] == ["a", "b"] and len(adj["adjacency"]) == 2


def test_config_validation():
    with pytest.raises(InputError):
        GlassoConfig(rho=0)
    with pytest.raises(InputError):
        GlassoConfig(lam=-1)
    with pytest.raises(InputError):
        GlassoConfig(lam=np.ones((2, 2))).mask(3)
