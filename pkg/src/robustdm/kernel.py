"""Discretized conditional-expectation operators on a grid."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .errors import DomainEvaluationError
from .models import ARGModel
from .numgrid import DEFAULT_GH_ORDER, DEFAULT_NODES, DEFAULT_WIDTH, GaussHermiteRule, Grid, interpolation_matrix


def default_grid(model, nodes: int = DEFAULT_NODES, width: float = DEFAULT_WIDTH) -> Grid:
    """Grid spanning +-width stationary standard deviations (ARG: starts at 0)."""
    if isinstance(model, ARGModel):
        hi = model.stationary_mean[0] + 2 * width * np.sqrt(model.stationary_cov[0, 0])
        return Grid.uniform([0.0], [hi], nodes)
    return Grid.around(model.stationary_mean, model.stationary_cov, nodes, width)


def _block_rows(weights: np.ndarray) -> sp.csr_matrix:
    """n x (n*q) matrix whose row i holds weights[i] in columns i*q..i*q+q-1."""
    n, q = weights.shape
    indptr = np.arange(0, n * q + 1, q)
    return sp.csr_matrix((weights.ravel(), np.arange(n * q), indptr), shape=(n, n * q))


@dataclass(frozen=True, eq=False)
class Kernel:
    """Transition quadrature attached to every node of a grid.

    Attributes
    ----------
    points : (n, q, d) next-state nodes for each grid node.
    logw : (n, q) log probability weights (each row sums to one in levels).
    S : sparse (n*q, n) interpolation from grid values to ``points``.
    U : (n, q) utility growth u(x_i, points_ij), or None.
    """

    grid: Grid
    points: np.ndarray
    logw: np.ndarray
    S: sp.csr_matrix
    U: np.ndarray | None
    interp: str
    extrap: str

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def q(self) -> int:
        return self.points.shape[1]

    @cached_property
    def weights(self) -> np.ndarray:
        return np.exp(self.logw)

    @cached_property
    def P(self) -> sp.csr_matrix:
        """Benchmark conditional-expectation matrix on grid values."""
        return (_block_rows(self.weights) @ self.S).tocsr()

    @cached_property
    def nonnegative(self) -> bool:
        return bool(self.S.data.min(initial=0.0) >= 0)

    def at_nodes(self, values: np.ndarray) -> np.ndarray:
        """Grid values interpolated at every quadrature node, shape (n, q)."""
        return (self.S @ values).reshape(self.n, self.q)

    def expect(self, values: np.ndarray) -> np.ndarray:
        return self.P @ values

    def expect_pairs(self, arr: np.ndarray) -> np.ndarray:
        """E[h(x, X')|x] for h given at the quadrature nodes."""
        return np.sum(self.weights * arr, axis=1)

    def log_expect_exp(self, arr: np.ndarray) -> np.ndarray:
        """log E[exp(h(x, X'))|x] in log-space."""
        return logsumexp(self.logw + arr, axis=1)

    def tilted_matrix(self, log_ratio: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
        """Row-normalized expectation matrix under weights proportional to w * exp(log_ratio).

        Returns the matrix and the normalized node weights (n, q).
        """
        lw = self.logw + log_ratio
        lw = lw - logsumexp(lw, axis=1, keepdims=True)
        w = np.exp(lw)
        return (_block_rows(w) @ self.S).tocsr(), w


def build_kernel(model, grid: Grid, u=None, rule: GaussHermiteRule | None = None,
                 interp: str = "multilinear", extrap: str = "clamp") -> Kernel:
    """Attach the model's transition quadrature to every node of ``grid``."""
    rule = rule if rule is not None else GaussHermiteRule(DEFAULT_GH_ORDER)
    x = grid.points
    pts, logw = model.transition_nodes(x, rule)
    n, q, d = pts.shape
    S = interpolation_matrix(grid, pts.reshape(-1, d), interp, extrap)
    U = None
    if u is not None:
        U = np.asarray(u(np.broadcast_to(x[:, None, :], pts.shape), pts), dtype=float).reshape(n, q)
        bad = ~np.isfinite(U) & (logw > -np.inf)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise DomainEvaluationError(f"utility not finite at node {x[i].tolist()} -> {pts[i, j].tolist()}")
        U = np.where(np.isfinite(U), U, 0.0)
    return Kernel(grid, pts, logw, S, U, interp, extrap)
