from __future__ import annotations

import math
from math import comb

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robustdm.errors import FilterDegeneracyError
from robustdm.kernel import default_grid
from robustdm.learning import (LearnOptions, LearnPrefs, RectBeliefGrid, SimplexGrid, T_learn_single_exponential,
                               T_learn_values, kalman_kernel, kalman_steady_state, regime_filter_batch,
                               regime_kernel, solve_v_learn, upper_bound_learn)
from robustdm.models import LGModel, RegimeModel, StateSpaceModel, UtilityGrowth, regime_filter_step
from robustdm.numgrid import Grid
from robustdm.robust import Preferences, SolverOptions, lg_closed_form, solve

U_PHI = lambda phi: phi[:, 0]  # noqa: E731


@pytest.fixture(scope="module")
def two_regime():
    return RegimeModel([[0.9, 0.2], [0.1, 0.8]], [[0.5], [-0.5]], [[[1.0]], [[1.0]]])


@pytest.fixture(scope="module")
def two_kernel(two_regime):
    return regime_kernel(two_regime, U_PHI, SimplexGrid(2, 50))


# filter -----------------------------------------------------------------------

def test_filter_uninformative():
    model = RegimeModel(np.eye(3), [[0.0]] * 3, [[[1.0]]] * 3)
    xi = np.array([0.2, 0.5, 0.3])
    assert np.allclose(regime_filter_step(model, xi, [0.7]), xi, atol=1e-15)


def test_filter_bayes_by_hand():
    # emission ratio exp(mu^2/2) = 2 at phi = 0
    mu = math.sqrt(2 * math.log(2))
    model = RegimeModel(np.eye(2), [[0.0], [mu]], [[[1.0]], [[1.0]]])
    out = regime_filter_step(model, [0.5, 0.5], [0.0])
    assert out == pytest.approx([2 / 3, 1 / 3], abs=1e-14)
    batch = regime_filter_batch(model, np.array([0.5, 0.5]), np.log([2.0, 1.0]))
    assert batch == pytest.approx([2 / 3, 1 / 3], abs=1e-14)


def test_filter_applies_transition_after_update(two_regime):
    xi = np.array([0.3, 0.7])
    q = np.exp(two_regime.emission_logpdf([0.2])[0])
    post = q * xi / np.sum(q * xi)
    assert regime_filter_step(two_regime, xi, [0.2]) == pytest.approx(two_regime.Lambda @ post, abs=1e-14)


def test_filter_degeneracy(two_regime):
    with pytest.raises(FilterDegeneracyError):
        regime_filter_step(two_regime, [0.5, 0.5], [1e200])


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=50), st.floats(0, 1))
def test_filter_stays_on_simplex(obs, p0):
    model = RegimeModel([[0.7, 0.2, 0.1], [0.2, 0.5, 0.3], [0.1, 0.3, 0.6]], [[-1.0], [0.0], [2.0]],
                        [[[1.0]], [[0.3]], [[2.0]]])
    xi = np.array([p0, (1 - p0) / 2, (1 - p0) / 2])
    for phi in obs:
        xi = regime_filter_step(model, xi, [phi])
        assert np.all(xi >= 0) and abs(xi.sum() - 1) <= 1e-15


def test_filter_long_run_on_simplex(two_regime):
    _, obs = two_regime.simulate(100_000, seed=1)
    xi = np.array([0.5, 0.5])
    worst = 0.0
    for phi in obs:
        xi = regime_filter_step(two_regime, xi, phi)
        worst = max(worst, abs(xi.sum() - 1.0))
        assert xi.min() >= 0
    assert worst <= 2e-16


# simplex grid -------------------------------------------------------------------

@pytest.mark.parametrize("N,R", [(1, 10), (2, 200), (3, 12), (4, 6)])
def test_simplex_grid_points(N, R):
    g = SimplexGrid(N, R)
    assert g.size == comb(R + N - 1, N - 1)
    assert np.all(g.points >= 0)
    assert np.allclose(g.points.sum(axis=1), 1.0, atol=1e-15)
    S = g.interpolation_matrix(g.points)
    assert np.allclose(S.toarray(), np.eye(g.size), atol=1e-12)


@given(st.lists(st.floats(0.001, 1), min_size=3, max_size=3))
def test_simplex_interpolation_is_linear_exact(w):
    b = np.array(w) / np.sum(w)
    g = SimplexGrid(3, 7)
    coef = np.array([0.3, -1.2, 2.0])
    S = g.interpolation_matrix(b[None])
    assert np.all(S.data >= 0) and S.sum() == pytest.approx(1.0, abs=1e-12)
    assert (S @ (g.points @ coef))[0] == pytest.approx(b @ coef, abs=1e-12)


# operator identities ------------------------------------------------------------

def test_vartheta_equal_theta_paths(two_kernel):
    prefs = LearnPrefs(0.9, 2.0, 2.0)
    rng = np.random.default_rng(4)
    for _ in range(5):
        f = rng.normal(size=two_kernel.n) * 3
        a = T_learn_values(two_kernel, prefs, f)
        b = T_learn_single_exponential(two_kernel, prefs, f)
        assert np.max(np.abs(a - b)) < 1e-10


@given(st.floats(0.2, 20.0), st.floats(0.5, 0.95))
def test_vartheta_equal_theta_property(theta, beta):
    model = RegimeModel([[0.6, 0.3], [0.4, 0.7]], [[1.0], [-1.0]], [[[0.5]], [[2.0]]])
    k = regime_kernel(model, U_PHI, SimplexGrid(2, 20))
    prefs = LearnPrefs(beta, theta, theta)
    f = np.sin(np.arange(k.n))
    assert np.max(np.abs(T_learn_values(k, prefs, f) - T_learn_single_exponential(k, prefs, f))) < 1e-10


def test_large_vartheta_converges(two_kernel):
    f = np.linspace(-1, 1, two_kernel.n)
    limit = T_learn_values(two_kernel, LearnPrefs(0.9, 2.0), f)
    gaps = {vt: np.max(np.abs(T_learn_values(two_kernel, LearnPrefs(0.9, 2.0, vt), f) - limit))
            for vt in (1e4, 2e4, 1e6)}
    assert gaps[1e4] / gaps[2e4] == pytest.approx(2.0, rel=0.05)
    assert gaps[1e6] < gaps[1e4] / 50


# solver ---------------------------------------------------------------------------

def test_zero_utility_gives_zero(two_regime):
    k = regime_kernel(two_regime, lambda phi: np.zeros(len(phi)), SimplexGrid(2, 20))
    v, rep = solve_v_learn(k, LearnPrefs(0.9, 2.0, 4.0))
    assert np.max(np.abs(v.values)) < 1e-12
    assert np.max(np.abs(upper_bound_learn(k, LearnPrefs(0.9, 2.0)))) < 1e-15


def _single_regime(mu, s):
    return RegimeModel([[1.0]], [[mu]], [[[s * s]]])


@pytest.mark.parametrize("vartheta", [2.0, 0.7, 5.0])
def test_single_regime_matches_no_learning(vartheta):
    # one regime leaves only the observable's law uncertain, with penalty vartheta:
    # theta * v_learn = vartheta * v(beta, vartheta), equal values when vartheta = theta
    beta, theta, mu, s = 0.5, 2.0, 0.3, 1.2
    k = regime_kernel(_single_regime(mu, s), U_PHI, SimplexGrid(1, 1))
    v, _ = solve_v_learn(k, LearnPrefs(beta, theta, vartheta), LearnOptions(tol=1e-12))
    cf = lg_closed_form(LGModel([mu], [[0.0]], [[s]]), Preferences(beta, vartheta), UtilityGrowth(lambda1=[1.0]))
    assert theta * v.values[0] == pytest.approx(vartheta * cf.a, abs=1e-8)


def test_single_regime_equals_robust_solver():
    beta, theta = 0.5, 2.0
    model = LGModel([0.3], [[0.0]], [[1.2]])
    k = regime_kernel(_single_regime(0.3, 1.2), U_PHI, SimplexGrid(1, 1))
    v, _ = solve_v_learn(k, LearnPrefs(beta, theta, theta), LearnOptions(tol=1e-12))
    sol = solve(model, Preferences(beta, theta), UtilityGrowth(lambda1=[1.0]), SolverOptions(tol=1e-12))
    assert np.max(np.abs(sol.v.values - v.values[0])) < 1e-8


def test_single_regime_infinite_vartheta():
    beta, theta, mu = 0.5, 2.0, 0.3
    k = regime_kernel(_single_regime(mu, 1.0), U_PHI, SimplexGrid(1, 1))
    prefs = LearnPrefs(beta, theta)
    v, _ = solve_v_learn(k, prefs, LearnOptions(tol=1e-12))
    assert v.values[0] == pytest.approx(beta * prefs.alpha * mu / (1 - beta), abs=1e-10)


@pytest.mark.parametrize("vartheta", [4.0, 1.0, math.inf])
def test_two_regime_solution(two_kernel, vartheta):
    prefs = LearnPrefs(0.9, 2.0, vartheta)
    v, rep = solve_v_learn(two_kernel, prefs)
    assert rep.converged and rep.residual < 1e-9 and rep.monotone and rep.bounds_respected
    resid = np.max(np.abs(T_learn_values(two_kernel, prefs, v.values) - v.values))
    assert resid < 1e-9
    # p0 is the probability of the high-mean regime; alpha < 0 and u increasing
    p_high = two_kernel.belief_grid.points[:, 0]
    order = np.argsort(p_high)
    assert np.all(np.diff(v.values[order]) <= 1e-12)


def test_upper_bound_dominates(two_kernel):
    for vt in (0.5, 2.0, 8.0, math.inf):
        prefs = LearnPrefs(0.9, 2.0, vt)
        up = upper_bound_learn(two_kernel, prefs)
        assert np.all(T_learn_values(two_kernel, prefs, up) <= up + 1e-10)


# Kalman ---------------------------------------------------------------------------

def test_kalman_zero_noise():
    S, gain = kalman_steady_state(StateSpaceModel([[1.0]], [[0.0]], [[1.0]], [[0.0]]))
    assert np.all(S == 0) and np.all(gain == 0)


def test_kalman_scalar():
    S, gain = kalman_steady_state(StateSpaceModel([[1.0]], [[0.5]], [[1.0]], [[0.75]]))
    assert S[0, 0] == pytest.approx(math.sqrt(0.75), abs=1e-12)
    assert S[0, 0] == pytest.approx(0.25 * S[0, 0] / (S[0, 0] + 1) + 0.75, abs=1e-12)
    assert gain[0, 0] == pytest.approx(0.5 * S[0, 0] / (S[0, 0] + 1), abs=1e-12)


@given(st.floats(-0.9, 0.9), st.floats(0.0, 0.9), st.floats(0.1, 3.0), st.floats(0.0, 3.0))
def test_kalman_psd(b1, b2, su, sw):
    model = StateSpaceModel([[1.0, 0.5]], [[b1, 0.0], [0.1, b2]], [[su]], [[sw, 0.0], [0.0, sw / 2]])
    S, _ = kalman_steady_state(model)
    assert np.allclose(S, S.T)
    assert np.min(np.linalg.eigvalsh(S)) >= -1e-12


def test_kalman_kernel_solve():
    model = StateSpaceModel([[1.0]], [[0.5]], [[1.0]], [[0.75]])
    grid = default_grid(LGModel([0.0], [[0.5]], [[math.sqrt(0.75)]]), 41)
    k = kalman_kernel(model, U_PHI, RectBeliefGrid(Grid([grid.nodes_per_dim[0]]), extrap="linear"))
    prefs = LearnPrefs(0.5, 2.0, 2.0)
    v, rep = solve_v_learn(k, prefs)
    assert rep.residual < 1e-9
    # affine oracle a + b m: phi' ~ N(m, S + 1) and m' = 0.5 m + gain (phi' - m), so the gain cancels in b
    S, gain = kalman_steady_state(model)
    alpha, beta = prefs.alpha, prefs.beta
    b = beta * alpha / (1 - 0.5 * beta)
    c = alpha + b * gain[0, 0]
    a = beta / (1 - beta) * 0.5 * c * c * (S[0, 0] + 1.0)
    m = k.belief_grid.points[:, 0]
    inner = np.abs(m) < 1.5
    assert np.max(np.abs(v.values - (a + b * m))[inner]) < 1e-4
