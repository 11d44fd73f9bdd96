from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robustdm.errors import DivergenceError, DomainEvaluationError
from robustdm.numgrid import (GaussHermiteRule, Grid, GridFn, dense_solve, gh_expectation, interp_eval,
                              interpolation_matrix, neumann_solve)

finite = st.floats(-50, 50, allow_nan=False)


def test_grid_rejects_unsorted_and_short_nodes():
    with pytest.raises(ValueError):
        Grid(([0.0, 0.0, 1.0],))
    with pytest.raises(ValueError):
        Grid(([1.0],))


def test_grid_shape_bounds_and_row_major_points():
    g = Grid(([0.0, 1.0], [10.0, 20.0, 30.0]))
    assert g.dims == 2 and g.shape == (2, 3) and g.size == 6
    np.testing.assert_array_equal(g.bounds, [[0.0, 1.0], [10.0, 30.0]])
    np.testing.assert_array_equal(g.points[:3], [[0, 10], [0, 20], [0, 30]])


def test_trapezoid_weights_integrate_linear_functions():
    g = Grid.uniform([0.0], [2.0], 11)
    assert g.trapezoid_weights.sum() == pytest.approx(2.0)
    assert g.trapezoid_weights @ g.points[:, 0] == pytest.approx(2.0)


def test_gh_rule_weights_and_symmetry():
    for n in (1, 5, 31):
        r = GaussHermiteRule(n)
        assert r.weights.sum() == pytest.approx(math.sqrt(math.pi), abs=1e-12)
        assert np.all(r.weights > 0)
        np.testing.assert_allclose(np.sort(r.nodes), np.sort(-r.nodes), atol=1e-12)


def test_gh_expectation_examples():
    assert gh_expectation(GaussHermiteRule(5), [0.0], [[1.0]], lambda x: x[:, 0] ** 2) == pytest.approx(1.0, abs=1e-12)
    assert gh_expectation(GaussHermiteRule(20), [0.0], [[1.0]], lambda x: np.exp(x[:, 0])) == pytest.approx(
        math.exp(0.5), abs=1e-9)
    assert gh_expectation(GaussHermiteRule(1), [0.0], [[1.0]], lambda x: np.ones(len(x))) == 1.0


def test_gh_expectation_names_bad_node():
    with pytest.raises(DomainEvaluationError, match="node"):
        gh_expectation(GaussHermiteRule(3), [0.0], [[1.0]], lambda x: np.where(x[:, 0] > 0, np.inf, 0.0))


@pytest.mark.parametrize("n", [1, 3, 6])
def test_gh_exact_on_monomials_up_to_degree_2n_minus_1(n):
    # moments of N(0,1): E[x^k] = (k-1)!! for even k, 0 for odd k
    r = GaussHermiteRule(n)
    for k in range(2 * n):
        exact = 0.0 if k % 2 else float(np.prod(np.arange(k - 1, 0, -2))) if k else 1.0
        got = gh_expectation(r, [0.0], [[1.0]], lambda x, k=k: x[:, 0] ** k)
        assert got == pytest.approx(exact, abs=1e-10 * max(1.0, exact))


def test_gh_two_dimensional_covariance():
    L = np.linalg.cholesky(np.array([[2.0, 0.5], [0.5, 1.0]]))
    got = gh_expectation(GaussHermiteRule(4), [1.0, -1.0], L, lambda x: x[:, 0] * x[:, 1])
    assert got == pytest.approx(0.5 + 1.0 * -1.0, abs=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2))
def test_gh_linear_in_integrand(a, b, c):
    r = GaussHermiteRule(8)
    f = lambda x: np.sin(x[:, 0])  # noqa: E731
    g = lambda x: x[:, 0] ** 3  # noqa: E731
    lhs = gh_expectation(r, [c], [[1.0]], lambda x: a * f(x) + b * g(x))
    rhs = a * gh_expectation(r, [c], [[1.0]], f) + b * gh_expectation(r, [c], [[1.0]], g)
    assert lhs == pytest.approx(rhs, abs=1e-10)


def test_interp_examples():
    g = Grid.uniform([-1.0], [1.0], 5)
    assert interp_eval(GridFn.constant(g, 3.0), 17.0) == 3.0
    lin = GridFn(Grid(([0.0, 1.0],)), [0.0, 1.0])
    assert interp_eval(lin, 0.25) == 0.25
    sq = GridFn(Grid(([0.0, 1.0, 2.0],)), [0.0, 1.0, 4.0])
    assert interp_eval(sq, 0.5) == pytest.approx(0.5)


def test_interp_nan_raises():
    f = GridFn.constant(Grid.uniform([0.0], [1.0], 3), 1.0)
    with pytest.raises(DomainEvaluationError):
        interp_eval(f, float("nan"))


def test_extrapolation_modes():
    g = Grid.uniform([0.0], [1.0], 3)
    clamp = GridFn(g, [0.0, 0.5, 1.0])
    lin = GridFn(g, [0.0, 0.5, 1.0], extrap="linear")
    assert clamp(2.0) == 1.0 and clamp(-1.0) == 0.0
    assert lin(2.0) == pytest.approx(2.0) and lin(-1.0) == pytest.approx(-1.0)


def test_cubic_reproduces_cubic_polynomials():
    g = Grid.uniform([-2.0], [2.0], 9)
    f = GridFn.from_function(g, lambda p: p[:, 0] ** 3 - p[:, 0], interp="cubic")
    x = np.linspace(-1.9, 1.9, 17)
    np.testing.assert_allclose(f(x), x**3 - x, atol=1e-12)


@given(st.lists(finite, min_size=3, max_size=8), st.sampled_from(["multilinear", "cubic"]))
def test_exact_at_nodes(vals, interp):
    g = Grid.uniform([0.0], [1.0], len(vals))
    f = GridFn(g, vals, interp=interp)
    np.testing.assert_allclose(f(g.points), vals, atol=1e-9)


@given(st.lists(finite, min_size=2, max_size=8), st.floats(0, 1))
def test_multilinear_monotone_between_nodes(vals, t):
    g = Grid.uniform([0.0], [1.0], len(vals))
    f = GridFn(g, vals)
    i = 0
    x = g.nodes_per_dim[0][i] + t * (g.nodes_per_dim[0][1] - g.nodes_per_dim[0][0])
    lo, hi = sorted(vals[:2])
    assert lo - 1e-12 <= f(x) <= hi + 1e-12


def test_interpolation_rows_sum_to_one_in_2d():
    g = Grid.uniform([0.0, -1.0], [1.0, 1.0], [4, 5])
    pts = np.random.default_rng(0).uniform(-2, 2, size=(50, 2))
    for interp in ("multilinear", "cubic"):
        for extrap in ("clamp", "linear"):
            M = interpolation_matrix(g, pts, interp, extrap)
            np.testing.assert_allclose(np.asarray(M.sum(axis=1)).ravel(), 1.0, atol=1e-12)


def test_gridfn_csv_roundtrip(tmp_path):
    g = Grid.uniform([0.0, 1.0], [1.0, 2.0], [3, 2], names=("a", "b"))
    f = GridFn.from_function(g, lambda p: p[:, 0] * 10 + p[:, 1])
    path = tmp_path / "f.csv"
    text = f.to_csv(path, "v")
    assert text.splitlines()[0] == "a,b,v"
    back = GridFn.from_csv(path)
    np.testing.assert_array_equal(back.values, f.values)
    np.testing.assert_array_equal(back.grid.points, g.points)


def test_neumann_examples():
    n = 7
    np.testing.assert_allclose(neumann_solve(0.5 * np.eye(n), np.ones(n), tol=1e-13), 2.0, atol=1e-12)
    rhs = np.arange(n, dtype=float)
    np.testing.assert_array_equal(neumann_solve(np.zeros((n, n)), rhs), rhs)


def test_neumann_accepts_gridfn_callable():
    g = Grid.uniform([0.0], [1.0], 4)
    out = neumann_solve(lambda f: f.with_values(0.25 * f.values), GridFn.constant(g, 3.0), tol=1e-14)
    np.testing.assert_allclose(out.values, 4.0, atol=1e-13)


def test_neumann_diverges_for_radius_one():
    with pytest.raises(DivergenceError):
        neumann_solve(np.eye(3), np.ones(3), window=10)


@given(st.integers(0, 10_000))
def test_neumann_residual_and_dense_agreement(seed):
    rng = np.random.default_rng(seed)
    K = rng.uniform(size=(6, 6))
    K *= 0.8 / K.sum(axis=1, keepdims=True)
    b = rng.normal(size=6)
    tol = 1e-12
    f = neumann_solve(K, b, tol=tol)
    assert np.max(np.abs(f - K @ f - b)) < 10 * tol
    assert np.max(np.abs(f - dense_solve(K, b))) < 10 * tol
