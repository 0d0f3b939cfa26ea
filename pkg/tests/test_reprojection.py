import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from koopman_reproj.covariance import CovarianceSurrogate, regularized
from koopman_reproj.dictionary import MonomialDictionary
from koopman_reproj.dynamics import Box
from koopman_reproj.reprojection import (
    GridOracle,
    GridTooLargeError,
    WeightMatrix,
    brute_force_project,
    coordinate_project,
    coordinate_weight,
    covariance_weight,
    ml_weight,
    newton_project,
    objective,
)

D1 = MonomialDictionary(1, 3)
LINE = Box([-2.0], [2.0])


def gradient(d, W, z, x):
    return d.jacobian(x).T @ W @ (d.lift(x) - z)


# --- weights ----------------------------------------------------------------------


def test_coordinate_weight_examples():
    np.testing.assert_array_equal(np.diag(coordinate_weight(MonomialDictionary(2, 2)).W), [1, 1, 0, 0, 0, 0])
    np.testing.assert_array_equal(np.diag(coordinate_weight(D1).W), [1, 0, 0, 0])
    d = MonomialDictionary(3, 3, {(1, 0, 0)})
    W = coordinate_weight(d).W
    ones = {d.index((0, 1, 0)), d.index((0, 0, 1)), d.index((3, 0, 0))}
    assert set(np.flatnonzero(np.diag(W))) == ones
    assert np.count_nonzero(W) == 3


def test_weight_validation_and_factor():
    with pytest.raises(ValueError, match="symmetric"):
        WeightMatrix(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="kind"):
        WeightMatrix(np.eye(2), "diagonal")
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 4))
    wm = WeightMatrix(A @ A.T)
    np.testing.assert_allclose(wm.factor.T @ wm.factor, wm.W, atol=1e-12 * np.abs(wm.W).max())


def test_ml_weight_examples():
    np.testing.assert_allclose(covariance_weight(np.eye(3), ridge=0.0).W, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(covariance_weight(np.diag([4.0, 1.0, 1.0]), ridge=0.0).W, np.diag([0.25, 1, 1]), atol=1e-15)
    B = np.zeros((2, 2, 3, 3))
    B[0, 0] = np.diag([4.0, 1.0, 1.0])
    wm = ml_weight(CovarianceSurrogate(B), [0.7])
    assert wm.kind == "inverse_covariance"
    np.testing.assert_allclose(wm.W, np.diag([0.25, 1, 1]), rtol=1e-9)


@given(st.integers(0, 2**32 - 1))
def test_weight_inverts_covariance(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(5, 5))
    S = A @ A.T + 0.1 * np.eye(5)
    wm = covariance_weight(S)
    np.testing.assert_allclose(wm.W @ regularized(S), np.eye(5), atol=1e-10)
    np.testing.assert_allclose(wm.factor.T @ wm.factor, wm.W, rtol=1e-10, atol=1e-10 * np.abs(wm.W).max())


# --- coordinate projection -----------------------------------------------------------


def test_coordinate_project_examples():
    res = coordinate_project(D1, [0.5, 9, 9, 9])
    assert res.x[0] == 0.5
    np.testing.assert_array_equal(res.z, [0.5, 1, 0.25, 0.125])
    assert res.converged and res.iterations == 0
    x = np.array([0.3, -1.7])
    d2 = MonomialDictionary(2, 4)
    np.testing.assert_array_equal(coordinate_project(d2, d2.lift(x)).x, x)


def test_coordinate_project_agrees_with_grid_oracle():
    z = np.array([0.75, 3.0, -1.0, 2.0])
    grid = brute_force_project(D1, coordinate_weight(D1), z, LINE, 401)  # 0.75 is a grid point
    assert grid.x[0] == coordinate_project(D1, z).x[0]


# --- Newton --------------------------------------------------------------------------


@pytest.mark.parametrize("x_star", [[0.8], [-1.3], [0.0]])
def test_newton_fixed_point(x_star):
    res = newton_project(D1, np.eye(4), D1.lift(x_star), x_star)
    assert res.converged and res.iterations <= 2
    assert abs(res.x[0] - x_star[0]) <= 1e-12


def test_newton_with_coordinate_weight_matches_readout():
    d = MonomialDictionary(2, 3)
    rng = np.random.default_rng(1)
    for _ in range(10):
        z = rng.normal(size=d.size)
        x0 = d.invert_on_manifold(z)
        res = newton_project(d, coordinate_weight(d), z, x0)
        np.testing.assert_allclose(res.x, coordinate_project(d, z).x, atol=1e-10)


def test_newton_d1_against_fine_grid():
    z = D1.lift([0.8]) + np.array([0.0, 0.05, -0.03, 0.02])
    res = newton_project(D1, np.eye(4), z, [0.8])
    grid = brute_force_project(D1, np.eye(4), z, LINE, 40001)  # spacing 1e-4
    assert res.converged
    assert abs(res.x[0] - grid.x[0]) <= 1e-4
    assert res.objective <= grid.objective + 1e-12


def test_result_lies_on_manifold():
    z = np.array([0.4, 1.2, 0.1, 0.3])
    for res in (newton_project(D1, np.eye(4), z, [0.4]), coordinate_project(D1, z)):
        assert np.array_equal(res.z, D1.lift(res.x))


@given(st.floats(-1.8, 1.8), st.lists(st.floats(-0.2, 0.2), min_size=4, max_size=4))
def test_descent_and_first_order_optimality(x, eta):
    z = D1.lift([x]) + np.array(eta)
    x0 = D1.invert_on_manifold(z)
    W = np.diag([1.0, 2.0, 0.5, 3.0])
    res = newton_project(D1, W, z, x0, domain=LINE)
    if res.converged:
        assert objective(D1, W, z, res.x) <= objective(D1, W, z, x0) + 1e-12
        assert np.linalg.norm(gradient(D1, W, z, res.x)) <= 10 * 1e-8 * np.linalg.norm(W, 2) or res.x[0] in (-2.2, 2.2)


@pytest.mark.parametrize("offset", [0.0, 1e-3])
def test_local_superlinear_convergence(offset):
    # the Hessian model J^T W J drops the curvature term, so the rate constant
    # grows with the distance of z from the manifold; see test_large_residual_rate
    d = MonomialDictionary(2, 3)
    rng = np.random.default_rng(5)
    W = np.diag(rng.uniform(0.5, 2.0, d.size))
    for _ in range(10):
        x = rng.uniform(-1.5, 1.5, 2)
        z = d.lift(x) + offset * rng.normal(size=d.size)
        ref = newton_project(d, W, z, x, tol=1e-13)
        start = ref.x + 1e-2 * rng.uniform(-1, 1, 2) / np.sqrt(2)
        res = newton_project(d, W, z, start)
        assert res.converged
        ns = res.step_norms[-3:]
        for a, b in zip(ns, ns[1:]):
            assert b <= 10 * a**1.5


def test_large_residual_rate():
    d = MonomialDictionary(2, 3)
    rng = np.random.default_rng(5)
    W = np.diag(rng.uniform(0.5, 2.0, d.size))
    x = rng.uniform(-1.5, 1.5, 2)
    z = d.lift(x) + 0.05 * rng.normal(size=d.size)
    res = newton_project(d, W, z, x, tol=1e-14)
    ratios = [b / a for a, b in zip(res.step_norms, res.step_norms[1:]) if b > 1e-13]
    # linear contraction: successive ratios settle instead of shrinking to zero
    assert res.converged and 1e-4 < ratios[-1] < 1.0


def test_k_max_reached_still_returns():
    z = D1.lift([1.5]) + 0.1
    res = newton_project(D1, np.eye(4), z, [-1.5], k_max=1)
    assert not res.converged and res.iterations == 1
    assert np.array_equal(res.z, D1.lift(res.x))


def test_singular_weight_reported():
    res = newton_project(D1, np.zeros((4, 4)), D1.lift([0.5]), [0.3])
    assert res.condition == float("inf")
    assert res.x[0] == 0.3


def test_iterates_clamped_to_inflated_box():
    z = D1.lift([5.0])
    res = newton_project(D1, np.eye(4), z, [1.9], domain=LINE)
    assert res.x[0] == pytest.approx(2.2, abs=1e-12)


def test_invalid_tolerance():
    with pytest.raises(ValueError):
        newton_project(D1, np.eye(4), D1.lift([0.1]), [0.1], tol=0.0)


@given(st.floats(-1.9, 1.9), st.lists(st.floats(-0.3, 0.3), min_size=4, max_size=4))
def test_newton_not_worse_than_grid(x, eta):
    z = D1.lift([x]) + np.array(eta)
    W = np.eye(4)
    oracle = GridOracle(D1, W, LINE, 4001)
    g = oracle.project(z)
    assume(abs(g.x[0]) < 1.99)
    res = newton_project(D1, W, z, g.x, domain=LINE)
    h = oracle.cell_diameter
    slack = h * np.linalg.norm(gradient(D1, W, z, g.x)) + h**2 * np.linalg.norm(D1.jacobian(g.x), 2) ** 2
    assert res.objective <= g.objective + slack + 1e-12


# --- grid oracle ---------------------------------------------------------------------


def test_grid_returns_exact_grid_point():
    d = MonomialDictionary(2, 3)
    box = Box([-1.0, -1.0], [1.0, 1.0])
    x = np.array([0.25, -0.5])  # on the 9-point grid
    np.testing.assert_array_equal(brute_force_project(d, np.eye(d.size), d.lift(x), box, 9).x, x)


def test_zero_weight_tie_break():
    box = Box([-1.0, 0.0], [1.0, 2.0])
    d = MonomialDictionary(2, 2)
    res = brute_force_project(d, np.zeros((6, 6)), np.ones(6), box, 5)
    np.testing.assert_array_equal(res.x, [-1.0, 0.0])


@given(st.integers(2, 60), st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_grid_refinement_never_worse(n, z):
    z = np.array(z)
    # 2n - 1 points halve the spacing and keep every old grid point
    coarse = brute_force_project(D1, np.eye(4), z, LINE, n)
    fine = brute_force_project(D1, np.eye(4), z, LINE, 2 * n - 1)
    assert fine.objective <= coarse.objective


def test_grid_size_guard():
    with pytest.raises(GridTooLargeError):
        brute_force_project(MonomialDictionary(3, 2), np.eye(10), np.zeros(10), Box([0, 0, 0], [1, 1, 1]), 1001)
