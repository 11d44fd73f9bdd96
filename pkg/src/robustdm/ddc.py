"""
Dynamic discrete choice with type-I extreme value shocks.

    v(x) = log sum_d exp(u_d(x) + beta E[v(X') | x, d]) + euler_gamma

Each action carries a conditional-expectation matrix on the grid.  Models
can be built from per-action benchmark laws on a continuous grid or from
explicit transition matrices on a finite chain.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp, softmax

from .errors import DomainEvaluationError, NonConvergenceError
from .kernel import build_kernel
from .numgrid import GaussHermiteRule, Grid
from .robust import SolveReport, iterate_fixed_point

EULER_GAMMA = float(np.euler_gamma)


@dataclass(frozen=True, eq=False)
class DDCModel:
    """Actions on a common set of nodes.

    Attributes
    ----------
    points : (n, d) node coordinates (or state labels for a finite chain).
    utilities : (D, n) flow utility of each action at each node.
    transitions : D sparse (n, n) matrices; row i gives E[f(X') | x_i, d].
    beta : discount factor.
    """

    points: np.ndarray
    utilities: np.ndarray
    transitions: tuple
    beta: float
    grid: Grid | None = None

    def __post_init__(self):
        U = np.atleast_2d(np.asarray(self.utilities, dtype=float))
        D, n = U.shape
        if D < 1:
            raise ValueError("need at least one action")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        mats = tuple(sp.csr_matrix(M, dtype=float) for M in self.transitions)
        if len(mats) != D or any(M.shape != (n, n) for M in mats):
            raise ValueError("one (n x n) transition matrix per action is required")
        for d, M in enumerate(mats):
            if M.data.size and M.data.min() < -1e-12:
                raise ValueError(f"action {d}: transition weights must be non-negative")
            if not np.allclose(np.asarray(M.sum(axis=1)).ravel(), 1.0, atol=1e-10):
                raise ValueError(f"action {d}: transition rows must sum to one")
        if not np.all(np.isfinite(U)):
            i, j = np.argwhere(~np.isfinite(U))[0]
            raise DomainEvaluationError(f"flow utility of action {i} not finite at node {j}")
        object.__setattr__(self, "utilities", U)
        object.__setattr__(self, "transitions", mats)
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float).reshape(n, -1))

    @property
    def D(self) -> int:
        return self.utilities.shape[0]

    @property
    def n(self) -> int:
        return self.utilities.shape[1]

    @classmethod
    def finite(cls, utilities, transitions, beta: float) -> "DDCModel":
        """Finite chain with dense transition matrices ``transitions[d][i, j] = P(j | i, d)``."""
        U = np.atleast_2d(np.asarray(utilities, dtype=float))
        return cls(np.arange(U.shape[1], dtype=float)[:, None], U, tuple(transitions), beta)

    @classmethod
    def on_grid(cls, grid: Grid, utilities: Sequence[Callable], laws: Sequence, beta: float,
                rule: GaussHermiteRule | None = None) -> "DDCModel":
        """Continuous state: ``utilities[d]`` maps (n, d) points to values; ``laws[d]`` is a benchmark model."""
        U = np.stack([np.asarray(f(grid.points), dtype=float).reshape(-1) for f in utilities])
        mats = tuple(build_kernel(law, grid, None, rule).P for law in laws)
        return cls(grid.points, U, mats, beta, grid)

    def mixed_kernel(self) -> sp.csr_matrix:
        return (sum(self.transitions) / self.D).tocsr()


def _log_matvec_exp(P: sp.csr_matrix, L: np.ndarray) -> np.ndarray:
    """log(P exp(L)) row by row with per-row max shifting."""
    vals = L[P.indices]
    starts = P.indptr[:-1]
    rowmax = np.maximum.reduceat(vals, starts)
    rows = np.repeat(np.arange(P.shape[0]), np.diff(P.indptr))
    acc = np.bincount(rows, weights=P.data * np.exp(vals - rowmax[rows]), minlength=P.shape[0])
    with np.errstate(divide="ignore"):
        return np.log(acc) + rowmax


def choice_values(model: DDCModel, f: np.ndarray) -> np.ndarray:
    """u_d + beta E[f | x, d], shape (D, n)."""
    cont = np.stack([M @ f for M in model.transitions])
    out = model.utilities + model.beta * cont
    if not np.all(np.isfinite(out)):
        d, i = np.argwhere(~np.isfinite(out))[0]
        raise DomainEvaluationError(f"continuation not finite at node {i}, action {d}")
    return out


def bellman_values(model: DDCModel, f: np.ndarray) -> np.ndarray:
    return logsumexp(choice_values(model, f), axis=0) + EULER_GAMMA


def apply_bellman(model: DDCModel, f) -> np.ndarray:
    """One Bellman application; ``f`` is an array of node values or a GridFn."""
    vals = getattr(f, "values", f)
    out = bellman_values(model, np.asarray(vals, dtype=float))
    return f.with_values(out) if hasattr(f, "with_values") else out


_UNIT = 2.0**52


def ccp(model: DDCModel, v: np.ndarray) -> np.ndarray:
    """Conditional choice probabilities, shape (D, n); columns sum to exactly one.

    Probabilities are rounded to multiples of 2**-52 (error below 1.2e-16), so
    every partial sum is exact, and the most likely action takes the remainder.
    """
    w = softmax(choice_values(model, v), axis=0)
    q = np.round(w * _UNIT)
    top = np.argmax(q, axis=0)
    cols = np.arange(q.shape[1])
    q[top, cols] += _UNIT - q.sum(axis=0)
    return q / _UNIT


def upper_bound_ddc(model: DDCModel, tol: float = 1e-13) -> np.ndarray:
    """Explicit upper bound built from U = mean_d exp(u_d / (1 - beta)) and the mixed kernel."""
    b, D = model.beta, model.D
    Q = model.mixed_kernel()
    L = logsumexp(model.utilities / (1 - b), axis=0) - np.log(D)
    total = np.zeros(model.n)
    disc = 1.0
    for _ in range(1_000_000):
        total += disc * L
        disc *= b
        if disc * np.max(np.abs(L)) / (1 - b) < tol:
            break
        L = _log_matvec_exp(Q, L)
    return (1 - b) * total + (np.log(D) + EULER_GAMMA) / (1 - b)


@dataclass(frozen=True)
class DDCOptions:
    tol: float = 1e-11
    max_iters: int = 100_000
    slack: float = 1e-10


def solve_ddc(model: DDCModel, opts: DDCOptions = DDCOptions()) -> tuple[np.ndarray, np.ndarray, SolveReport]:
    """Value function, CCPs and report; iteration starts at the explicit upper bound."""
    upper = upper_bound_ddc(model)
    scale = max(1.0, float(np.max(np.abs(upper))))
    slack = opts.slack * scale
    v, iters, resid, max_inc = iterate_fixed_point(lambda f: bellman_values(model, f), upper, opts.tol,
                                                   opts.max_iters, slack)
    report = SolveReport(iters, resid, True, bool(np.all(v <= upper + slack)), slack, resid < opts.tol, max_inc)
    return v, ccp(model, v), report


def dense_value_iteration(model: DDCModel, tol: float = 1e-13, max_iters: int = 1_000_000) -> np.ndarray:
    """Plain value iteration from zero with dense matrices (reference solver for small chains)."""
    mats = [M.toarray() for M in model.transitions]
    v = np.zeros(model.n)
    for _ in range(max_iters):
        new = logsumexp(model.utilities + model.beta * np.stack([M @ v for M in mats]), axis=0) + EULER_GAMMA
        if np.max(np.abs(new - v)) < tol:
            return new
        v = new
    raise NonConvergenceError("dense value iteration did not converge")


@dataclass(frozen=True, eq=False)
class StationaryReport:
    density: np.ndarray
    probabilities: np.ndarray
    doeblin_ok: bool
    renewal_state_independent: bool
    iterations: int


def renewal_stationary(model: DDCModel, renewal_action: int, tol: float = 1e-14, max_iters: int = 1_000_000
                       ) -> StationaryReport:
    """Stationary law of the mixed kernel by power iteration, with the renewal minorization check."""
    P_r = model.transitions[renewal_action].toarray()
    independent = bool(np.allclose(P_r, P_r[0][None, :], atol=1e-10))
    Q = model.mixed_kernel()
    doeblin = bool(np.all(Q.toarray() >= P_r / model.D - 1e-14))
    QT = Q.T.tocsr()
    pi = np.full(model.n, 1.0 / model.n)
    for it in range(1, max_iters + 1):
        new = QT @ pi
        new /= new.sum()
        if np.max(np.abs(new - pi)) < tol:
            pi = new
            break
        pi = new
    else:
        raise NonConvergenceError("stationary distribution power iteration did not converge")
    if model.grid is not None:
        density = pi / model.grid.trapezoid_weights
    else:
        density = pi.copy()
    return StationaryReport(density, pi, doeblin, independent, it)
