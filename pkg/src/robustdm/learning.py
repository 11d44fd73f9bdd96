"""
Robust values when the decision maker learns about a hidden state.

Beliefs are summarized by a grid: the probability simplex for hidden
regimes, or a rectangle of posterior means for the steady-state Kalman
filter.  For each belief node the operator needs three nested layers:
hidden states (weighted by the belief), next observables (weighted by the
emission law), and the updated belief.  ``LearningKernel`` stores them as
arrays of shape (n, J, Q).

With robustness ``theta`` about the observable's law and ``vartheta`` about
the hidden state,

    T f(b) = beta log sum_j b_j [ E_j exp((theta/vartheta) (f(b') + alpha u)) ]^(vartheta/theta),

and ``vartheta = inf`` replaces the bracket by exp(E_j[f(b') + alpha u]).
Both follow from the value recursion with V = U/(1-beta) - theta v; the
ratio theta/vartheta multiplies the utility term as well, which makes the
finite-vartheta operator converge to the limiting one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations_with_replacement

import numpy as np
import scipy.sparse as sp
from scipy import linalg
from scipy.special import logsumexp

from .errors import AssumptionViolationError, NonConvergenceError
from .models import RegimeModel, StateSpaceModel, regime_filter_step
from .numgrid import GaussHermiteRule, Grid, interpolation_matrix
from .robust import SolveReport, iterate_fixed_point


@dataclass(frozen=True)
class LearnPrefs:
    beta: float
    theta: float
    vartheta: float = math.inf

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not (self.theta > 0 and self.vartheta > 0):
            raise ValueError("theta and vartheta must be positive")

    @property
    def alpha(self) -> float:
        return -1.0 / (self.theta * (1.0 - self.beta))


# belief grids -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SimplexGrid:
    """Uniform lattice on the probability simplex with ``resolution`` steps per edge.

    Interpolation is piecewise linear on the Kuhn triangulation in cumulative
    coordinates, so weights are non-negative and nodes are reproduced exactly.
    """

    N: int
    resolution: int = 200

    @cached_property
    def _cum(self) -> np.ndarray:
        m = self.N - 1
        combos = list(combinations_with_replacement(range(self.resolution + 1), m)) if m else [()]
        return np.array(combos, dtype=int).reshape(len(combos), m)

    @cached_property
    def _index(self) -> dict:
        return {tuple(c): i for i, c in enumerate(self._cum)}

    @property
    def size(self) -> int:
        return self._cum.shape[0]

    @cached_property
    def points(self) -> np.ndarray:
        """Simplex coordinates of every node, shape (size, N)."""
        R = self.resolution
        c = np.hstack([np.zeros((self.size, 1), dtype=int), self._cum, np.full((self.size, 1), R)])
        return np.diff(c, axis=1) / R

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f"p{k}" for k in range(self.N))

    def interpolation_matrix(self, beliefs: np.ndarray) -> sp.csr_matrix:
        b = np.asarray(beliefs, dtype=float).reshape(-1, self.N)
        m = b.shape[0]
        if self.N == 1:
            return sp.csr_matrix((np.ones(m), (np.arange(m), np.zeros(m, dtype=int))), shape=(m, 1))
        R = self.resolution
        y = np.clip(np.cumsum(b[:, :-1], axis=1) * R, 0, R)
        y = np.maximum.accumulate(y, axis=1)
        base = np.minimum(np.floor(y).astype(int), R - 1)
        frac = y - base
        dims = self.N - 1
        # descending fractional part, ties broken toward the larger index
        order = dims - 1 - np.argsort(-frac[:, ::-1], axis=1, kind="stable")
        sorted_frac = np.take_along_axis(frac, order, axis=1)
        wts = np.empty((m, dims + 1))
        wts[:, 0] = 1.0 - sorted_frac[:, 0]
        wts[:, 1:-1] = sorted_frac[:, :-1] - sorted_frac[:, 1:]
        wts[:, -1] = sorted_frac[:, -1]
        rows, cols, vals = [], [], []
        vert = base.copy()
        for s in range(dims + 1):
            if s > 0:
                vert[np.arange(m), order[:, s - 1]] += 1
            idx = np.array([self._index[tuple(v)] for v in vert])
            keep = wts[:, s] != 0
            rows.append(np.arange(m)[keep])
            cols.append(idx[keep])
            vals.append(wts[keep, s])
        S = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(m, self.size))
        S.sum_duplicates()
        return S


@dataclass(frozen=True, eq=False)
class RectBeliefGrid:
    """Rectangular grid over Kalman posterior means."""

    grid: Grid
    interp: str = "multilinear"
    extrap: str = "clamp"

    @property
    def size(self) -> int:
        return self.grid.size

    @property
    def points(self) -> np.ndarray:
        return self.grid.points

    @property
    def names(self) -> tuple[str, ...]:
        return self.grid.names

    def interpolation_matrix(self, beliefs: np.ndarray) -> sp.csr_matrix:
        return interpolation_matrix(self.grid, beliefs, self.interp, self.extrap)


BeliefGrid = SimplexGrid | RectBeliefGrid


@dataclass(frozen=True, eq=False)
class BeliefFn:
    """Values on a belief grid."""

    belief_grid: object
    values: np.ndarray

    def __call__(self, beliefs) -> np.ndarray:
        return self.belief_grid.interpolation_matrix(beliefs) @ self.values

    def to_csv(self, path=None, value_name: str = "value") -> str:
        lines = [",".join([*self.belief_grid.names, value_name])]
        for p, v in zip(self.belief_grid.points, self.values):
            lines.append(",".join(repr(float(c)) for c in (*p, v)))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


# filters ----------------------------------------------------------------------

def regime_filter_batch(model: RegimeModel, xi: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """Vectorized filter update from log emission densities (broadcast over leading axes)."""
    with np.errstate(divide="ignore"):
        lp = np.log(np.clip(xi, 0, None)) + log_q
    post = np.exp(lp - logsumexp(lp, axis=-1, keepdims=True))
    out = post @ model.Lambda.T
    return out / out.sum(axis=-1, keepdims=True)


def kalman_steady_state(model: StateSpaceModel, tol: float = 1e-13, max_iters: int = 100_000
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Fixed point of the covariance recursion and the steady-state gain."""
    A, B, Su, Sw = model.A, model.B, model.Sigma_u, model.Sigma_w
    S = Sw.copy()
    for _ in range(max_iters):
        F = A @ S @ A.T + Su
        new = B @ (S - S @ A.T @ np.linalg.solve(F, A @ S)) @ B.T + Sw
        new = 0.5 * (new + new.T)
        if np.max(np.abs(new - S)) < tol:
            S = new
            break
        S = new
    else:
        raise NonConvergenceError("Riccati iteration did not converge")
    gain = B @ S @ A.T @ np.linalg.inv(A @ S @ A.T + Su)
    return S, gain


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    vals, vecs = linalg.eigh(S)
    return vecs * np.sqrt(np.clip(vals, 0, None))


# learning kernel ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LearningKernel:
    """Nested quadrature for the learning operator.

    logp : (n, J) log weights on hidden states given the belief node.
    logq : (n, J, Q) log weights on next observables given the hidden state.
    U : (n, J, Q) utility growth at the next observable.
    S : sparse (n*J*Q, n) interpolation at the updated beliefs.
    """

    belief_grid: object
    logp: np.ndarray
    logq: np.ndarray
    U: np.ndarray
    S: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.logp.shape[0]

    def at_next(self, values: np.ndarray) -> np.ndarray:
        return (self.S @ values).reshape(self.logq.shape)

    def log_expect_exp(self, arr: np.ndarray) -> np.ndarray:
        """log E^Q~[exp(h)] for h on (n, J, Q) under the composite predictive law."""
        return logsumexp(self.logp[:, :, None] + self.logq + arr, axis=(1, 2))


def regime_kernel(model: RegimeModel, u, grid: SimplexGrid, rule: GaussHermiteRule | None = None) -> LearningKernel:
    """Learning kernel for hidden regimes; ``u`` maps an (m, obs_dim) array of observables to m values."""
    rule = rule or GaussHermiteRule(31)
    phi, p = model.emission_nodes(rule)
    N, Q, mdim = phi.shape
    beliefs = grid.points
    n = beliefs.shape[0]
    with np.errstate(divide="ignore"):
        logp = np.log(beliefs)
    logq = np.broadcast_to(np.log(p), (n, N, Q)).copy()
    Uq = np.asarray(u(phi.reshape(-1, mdim)), dtype=float).reshape(N, Q)
    if not np.all(np.isfinite(Uq)):
        raise AssumptionViolationError("utility growth not finite at an emission quadrature node")
    lq_phi = model.emission_logpdf(phi.reshape(-1, mdim)).reshape(N, Q, N)
    nxt = regime_filter_batch(model, beliefs[:, None, None, :], lq_phi[None])
    S = grid.interpolation_matrix(nxt.reshape(-1, N))
    return LearningKernel(grid, logp, logq, np.broadcast_to(Uq, (n, N, Q)).copy(), S)


def kalman_kernel(model: StateSpaceModel, u, grid: RectBeliefGrid, rule: GaussHermiteRule | None = None
                  ) -> LearningKernel:
    """Learning kernel for the steady-state Kalman filter over posterior means."""
    rule = rule or GaussHermiteRule(15)
    Sbar, gain = kalman_steady_state(model)
    nx, m = model.state_dim, model.obs_dim
    z_x, p_x = rule.standard_normal(nx)
    z_u, p_u = rule.standard_normal(m)
    means = grid.points
    n = means.shape[0]
    hidden = means[:, None, :] + (z_x @ _psd_sqrt(Sbar).T)[None]
    phi = hidden @ model.A.T
    phi = phi[:, :, None, :] + (z_u @ _psd_sqrt(model.Sigma_u).T)[None, None]
    J, Q = z_x.shape[0], z_u.shape[0]
    Uq = np.asarray(u(phi.reshape(-1, m)), dtype=float).reshape(n, J, Q)
    if not np.all(np.isfinite(Uq)):
        raise AssumptionViolationError("utility growth not finite at an observation quadrature node")
    pred = means @ model.B.T
    innov = phi - (means @ model.A.T)[:, None, None, :]
    nxt = pred[:, None, None, :] + innov @ gain.T
    S = grid.interpolation_matrix(nxt.reshape(-1, nx))
    with np.errstate(divide="ignore"):
        logp = np.broadcast_to(np.log(p_x), (n, J)).copy()
        logq = np.broadcast_to(np.log(p_u), (n, J, Q)).copy()
    return LearningKernel(grid, logp, logq, Uq, S)


# operator and solver ------------------------------------------------------------

def T_learn_values(kernel: LearningKernel, prefs: LearnPrefs, f: np.ndarray) -> np.ndarray:
    a, b = prefs.alpha, prefs.beta
    fn = kernel.at_next(f)
    if math.isinf(prefs.vartheta):
        inner = np.sum(np.exp(kernel.logq) * (fn + a * kernel.U), axis=2)
    else:
        r = prefs.theta / prefs.vartheta
        inner = logsumexp(kernel.logq + r * (fn + a * kernel.U), axis=2) / r
    if not np.all(np.isfinite(inner[np.isfinite(kernel.logp)])):
        raise AssumptionViolationError("inner conditional integral is not finite")
    return b * logsumexp(kernel.logp + inner, axis=1)


def T_learn_single_exponential(kernel: LearningKernel, prefs: LearnPrefs, f: np.ndarray) -> np.ndarray:
    """The vartheta = theta reduction: one exponential under the predictive law."""
    return prefs.beta * kernel.log_expect_exp(kernel.at_next(f) + prefs.alpha * kernel.U)


def apply_T_learn(kernel: LearningKernel, prefs: LearnPrefs, f: BeliefFn) -> BeliefFn:
    return BeliefFn(f.belief_grid, T_learn_values(kernel, prefs, f.values))


def upper_bound_learn(kernel: LearningKernel, prefs: LearnPrefs, tol: float = 1e-13) -> np.ndarray:
    """Explicit upper bound ``f`` with ``T f <= f``.

    For vartheta >= theta (including inf) Jensen's inequality bounds the
    operator by the no-learning one, so the usual bound applies.  Otherwise
    the bound is (vartheta/theta) times the usual bound at alpha theta/vartheta.
    """
    a, b = prefs.alpha, prefs.beta
    if a == 0:
        return np.zeros(kernel.n)
    ratio = prefs.vartheta / prefs.theta
    if ratio >= 1:
        coef, scale = a / (1 - b), 1.0
    else:
        coef, scale = a / (ratio * (1 - b)), ratio
    L = kernel.log_expect_exp(coef * kernel.U)
    if not np.all(np.isfinite(L)):
        raise AssumptionViolationError("upper bound integrand is not finite")
    total = np.zeros(kernel.n)
    disc = b
    for _ in range(1_000_000):
        total += disc * L
        disc *= b
        if disc * np.max(np.abs(L)) / (1 - b) < tol:
            break
        L = kernel.log_expect_exp(kernel.at_next(L))
    return scale * (1 - b) * total


@dataclass(frozen=True)
class LearnOptions:
    tol: float = 1e-9
    max_iters: int = 10_000
    slack: float = 1e-10


def solve_v_learn(kernel: LearningKernel, prefs: LearnPrefs, opts: LearnOptions = LearnOptions()
                  ) -> tuple[BeliefFn, SolveReport]:
    """Iterate the learning operator from its explicit upper bound."""
    upper = upper_bound_learn(kernel, prefs)
    scale = max(1.0, float(np.max(np.abs(upper))))
    slack = max(opts.slack * scale, 1e-13 * scale)
    apply = lambda f: T_learn_values(kernel, prefs, f)  # noqa: E731
    v, iters, resid, max_inc = iterate_fixed_point(apply, upper, opts.tol, opts.max_iters, slack)
    bounds_ok = bool(np.all(v <= upper + slack))
    return BeliefFn(kernel.belief_grid, v), SolveReport(iters, resid, True, bounds_ok, slack, resid < opts.tol,
                                                        max_inc)


__all__ = ["LearnPrefs", "SimplexGrid", "RectBeliefGrid", "BeliefFn", "LearningKernel", "regime_kernel",
           "kalman_kernel", "kalman_steady_state", "regime_filter_batch", "T_learn_values",
           "T_learn_single_exponential", "apply_T_learn", "upper_bound_learn", "solve_v_learn", "LearnOptions",
           "regime_filter_step"]
