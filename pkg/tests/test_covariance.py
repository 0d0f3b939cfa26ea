import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from koopman_reproj.covariance import (
    CovarianceSurrogate,
    IdentifiabilityError,
    ResidualSamples,
    analytic_moment_matrix,
    fit_Q,
    propagate_covariance,
    residuals,
    sigma_at,
)
from koopman_reproj.dictionary import MonomialDictionary
from koopman_reproj.edmd import KoopmanModel, SnapshotSet


def heteroscedastic(a, b, n, M, seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-2, 2, n)
    r = (a + b * p)[:, None] * rng.standard_normal((n, M))
    return ResidualSamples(r, np.column_stack([np.ones(n), p]))


def test_m0_is_empirical_second_moment():
    rng = np.random.default_rng(0)
    r = rng.normal(size=(500, 4)) * [1, 10, 0.1, 3]
    Q = fit_Q(ResidualSamples(r, np.ones((500, 1))))
    emp = r.T @ r / 500
    np.testing.assert_allclose(Q.blocks[0, 0], emp, rtol=1e-12, atol=1e-12 * np.abs(emp).max())
    np.testing.assert_allclose(sigma_at(Q, [], ridge=0.0), emp, rtol=1e-12, atol=1e-12 * np.abs(emp).max())


def test_zero_residuals_give_zero_blocks():
    P = np.column_stack([np.ones(50), np.linspace(-1, 1, 50)])
    Q = fit_Q(ResidualSamples(np.zeros((50, 3)), P))
    assert np.all(Q.blocks == 0)


@pytest.mark.parametrize("p", [-1.0, 0.0, 1.0])
def test_heteroscedastic_recovery(p):
    a, b, M = 1.5, 0.5, 3
    Q = fit_Q(heteroscedastic(a, b, 100_000, M, seed=1))
    S = Q.evaluate([p])
    truth = (a + b * p) ** 2
    assert np.all(np.abs(np.diag(S) - truth) <= 0.1 * truth)
    assert np.abs(S - np.diag(np.diag(S))).max() <= 0.1 * truth


def test_block_symmetry_exact():
    Q = fit_Q(heteroscedastic(1.0, 0.3, 2000, 4, seed=2))
    for i in range(2):
        for j in range(2):
            assert np.array_equal(Q.blocks[i, j], Q.blocks[j, i].T)
    S = Q.evaluate([0.37])
    assert np.array_equal(S, S.T)


def test_analytic_moment_matrix_matches_monte_carlo():
    rng = np.random.default_rng(3)
    n = 200_000
    p = rng.uniform([-2, 10], [2, 30], (n, 2))
    pb = np.column_stack([np.ones(n), p])
    pp = (pb[:, :, None] * pb[:, None, :]).reshape(n, -1)
    X_mc = pp.T @ pp / n
    X = analytic_moment_matrix([-2, 10], [2, 30])
    # zero-mean entries are compared on the scale of their diagonal neighbours
    scale = np.sqrt(np.outer(np.diag(X), np.diag(X)))
    assert np.all(np.abs(X - X_mc) <= 2e-2 * scale)
    samples = heteroscedastic(1.0, 0.4, 50_000, 2, seed=4)
    Qa = fit_Q(samples, moment=analytic_moment_matrix([-2], [2]))
    Qm = fit_Q(samples)
    np.testing.assert_allclose(Qa.evaluate([0.5]), Qm.evaluate([0.5]), rtol=0.05, atol=0.05)


def test_identifiability_error():
    P = np.column_stack([np.ones(100), np.full(100, 0.3)])
    with pytest.raises(IdentifiabilityError, match="rank 1, need 3"):
        fit_Q(ResidualSamples(np.ones((100, 2)), P))


def test_residuals_of_zero_model():
    d = MonomialDictionary(1, 3)
    model = KoopmanModel(np.zeros((2, 4, 4)), d, 0.1)
    data = SnapshotSet([[0.5], [1.0]], [[0.1], [0.2]], [[0.6], [0.9]], 0.1)
    res = residuals(model, data)
    np.testing.assert_array_equal(res.r, d.lift(data.successors))
    np.testing.assert_array_equal(res.pbar, [[1, 0.1], [1, 0.2]])


def test_mean_residual_vanishes(pitchfork_fit):
    r = residuals(pitchfork_fit.model, pitchfork_fit.data).r
    assert np.linalg.norm(r.mean(0)) <= 1e-8 * np.abs(r).max()


def test_sigma_at_only_constant_block():
    B = np.zeros((2, 2, 3, 3))
    B[0, 0] = np.diag([1.0, 2.0, 3.0])
    Q = CovarianceSurrogate(B)
    for p in (-2.0, 0.0, 5.0):
        np.testing.assert_array_equal(sigma_at(Q, [p], ridge=0.25), np.diag([1.25, 2.25, 3.25]))


@given(st.floats(-2, 2), st.floats(1e-6, 1.0))
def test_sigma_at_is_symmetric_with_floor(p, ridge):
    Q = fit_Q(heteroscedastic(0.2, 1.0, 300, 5, seed=6))
    S = sigma_at(Q, [p], ridge)
    assert np.array_equal(S, S.T)
    assert np.linalg.eigvalsh(S).min() >= ridge * (1 - 1e-8)


def test_propagation_identities():
    d = MonomialDictionary(1, 2)
    rng = np.random.default_rng(7)
    A = rng.normal(size=(3, 3))
    Qb = np.zeros((2, 2, 3, 3))
    Qb[0, 0] = A @ A.T
    Q = CovarianceSurrogate(Qb)
    S = rng.normal(size=(3, 3))
    S = S @ S.T
    zero_model = KoopmanModel(np.zeros((2, 3, 3)), d, 0.1)
    np.testing.assert_array_equal(propagate_covariance(zero_model, Q, [0.4], S), Qb[0, 0])
    ident = KoopmanModel(np.stack([np.eye(3), np.zeros((3, 3))]), d, 0.1)
    np.testing.assert_allclose(propagate_covariance(ident, CovarianceSurrogate(np.zeros_like(Qb)), [0.4], S), S, rtol=1e-15)


def test_recurrence_and_psd(pitchfork_fit):
    model, Q = pitchfork_fit.model, pitchfork_fit.Q
    K = model.matrix([1.0])
    S = np.zeros((6, 6))
    for _ in range(5):
        S_next = propagate_covariance(model, Q, [1.0], S)
        A = K @ S @ K.T
        np.testing.assert_allclose(S_next - 0.5 * (A + A.T), Q.evaluate([1.0]), rtol=0, atol=1e-12 * np.abs(S_next).max())
        S = S_next
    assert np.linalg.eigvalsh(S).min() >= -1e-12 * np.abs(S).max() - np.abs(np.linalg.eigvalsh(Q.evaluate([1.0])).min()) * 10


def test_particle_simulation(pitchfork_fit):
    model, Q = pitchfork_fit.model, pitchfork_fit.Q
    p = [1.0]
    K = model.matrix(p)
    Qpp = Q.evaluate(p)
    lam, V = np.linalg.eigh(Qpp)
    root = V * np.sqrt(np.clip(lam, 0, None))
    rng = np.random.default_rng(11)
    n = 10_000
    eta = rng.standard_normal((n, 6)) @ root.T
    S = Qpp.copy()
    for _ in range(3):
        eta = eta @ K.T + rng.standard_normal((n, 6)) @ root.T
        S = propagate_covariance(model, Q, p, S)
        emp = np.cov(eta, rowvar=False)
        assert np.linalg.norm(emp - S) <= 0.1 * np.linalg.norm(S)
