"""
Tensor grids, interpolation, Gauss-Hermite quadrature and linear solves on grids.

Everything downstream evaluates functions of the state on a rectangular
tensor-product grid.  A :class:`GridFn` stores node values; evaluation
off the grid goes through a sparse interpolation matrix, so that applying
a conditional expectation to a grid function is a sparse mat-vec.

Values are stored flat in C (row-major) order over the per-dimension node
vectors, i.e. the last dimension varies fastest.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.polynomial.hermite import hermgauss

from .errors import DivergenceError, DomainEvaluationError

INTERP_METHODS = ("multilinear", "cubic")
EXTRAP_METHODS = ("clamp", "linear")

DEFAULT_NODES = 61
DEFAULT_WIDTH = 5.0
DEFAULT_GH_ORDER = 31
DENSE_LIMIT = 20_000


@dataclass(frozen=True, eq=False)
class Grid:
    """Tensor-product rectangular grid.

    Parameters
    ----------
    nodes_per_dim : sequence of 1-d arrays
        Strictly increasing node vectors, one per dimension, each with at
        least two entries.
    names : optional dimension names used in CSV headers.
    """

    nodes_per_dim: tuple[np.ndarray, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        nodes = []
        for k, g in enumerate(self.nodes_per_dim):
            g = np.asarray(g, dtype=float).copy()
            if g.ndim != 1 or g.size < 2:
                raise ValueError(f"dimension {k}: need at least 2 nodes")
            if not np.all(np.isfinite(g)) or np.any(np.diff(g) <= 0):
                raise ValueError(f"dimension {k}: nodes must be finite and strictly increasing")
            g.setflags(write=False)
            nodes.append(g)
        object.__setattr__(self, "nodes_per_dim", tuple(nodes))
        names = tuple(self.names) if self.names else tuple(f"x{k}" for k in range(len(nodes)))
        if len(names) != len(nodes):
            raise ValueError("names must match the number of dimensions")
        object.__setattr__(self, "names", names)

    @classmethod
    def uniform(cls, lo: Sequence[float], hi: Sequence[float], n: int | Sequence[int],
                names: Sequence[str] = ()) -> "Grid":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        counts = np.broadcast_to(np.asarray(n, dtype=int), lo.shape)
        return cls(tuple(np.linspace(a, b, int(m)) for a, b, m in zip(lo, hi, counts)), tuple(names))

    @classmethod
    def around(cls, mean, cov, n: int | Sequence[int] = DEFAULT_NODES, width: float = DEFAULT_WIDTH,
               names: Sequence[str] = ()) -> "Grid":
        """Grid spanning ``mean +- width`` marginal standard deviations."""
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        sd = np.sqrt(np.diag(np.atleast_2d(cov)))
        return cls.uniform(mean - width * sd, mean + width * sd, n, names)

    @property
    def dims(self) -> int:
        return len(self.nodes_per_dim)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(g.size for g in self.nodes_per_dim)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def bounds(self) -> np.ndarray:
        return np.array([[g[0], g[-1]] for g in self.nodes_per_dim])

    @cached_property
    def points(self) -> np.ndarray:
        """All nodes as an array of shape (size, dims), row-major order."""
        mesh = np.meshgrid(*self.nodes_per_dim, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        pts.setflags(write=False)
        return pts

    @cached_property
    def trapezoid_weights(self) -> np.ndarray:
        """Tensor trapezoid-rule weights, flat in grid order."""
        w = np.ones(1)
        for g in self.nodes_per_dim:
            h = np.diff(g)
            wk = np.zeros(g.size)
            wk[:-1] += h / 2
            wk[1:] += h / 2
            w = np.multiply.outer(w, wk).ravel()
        return w

    def refined(self) -> "Grid":
        """Grid with midpoints inserted in every cell (2n-1 nodes per dim)."""
        out = []
        for g in self.nodes_per_dim:
            r = np.empty(2 * g.size - 1)
            r[0::2] = g
            r[1::2] = 0.5 * (g[:-1] + g[1:])
            out.append(r)
        return Grid(tuple(out), self.names)

    def central_mask(self, center, halfwidth) -> np.ndarray:
        """Boolean mask of nodes with |x_k - center_k| <= halfwidth_k in every dim."""
        center = np.atleast_1d(center)
        halfwidth = np.atleast_1d(halfwidth)
        return np.all(np.abs(self.points - center) <= halfwidth + 1e-12, axis=1)


def _linear_weights(g: np.ndarray, y: np.ndarray, extrap: str):
    n = g.size
    idx = np.clip(np.searchsorted(g, y, side="right") - 1, 0, n - 2)
    t = (y - g[idx]) / (g[idx + 1] - g[idx])
    if extrap == "clamp":
        t = np.clip(t, 0.0, 1.0)
    cols = np.stack([idx, idx + 1], axis=1)
    wts = np.stack([1.0 - t, t], axis=1)
    return cols, wts


def _cubic_weights(g: np.ndarray, y: np.ndarray, extrap: str):
    """Local 4-point Lagrange weights; falls back to linear where n < 4 or outside."""
    n = g.size
    if n < 4:
        cols, wts = _linear_weights(g, y, extrap)
        pad = np.zeros((y.size, 2))
        return np.hstack([cols, cols]), np.hstack([wts, pad])
    lo, hi = g[0], g[-1]
    inside = (y >= lo) & (y <= hi)
    yc = np.clip(y, lo, hi)
    idx = np.clip(np.searchsorted(g, yc, side="right") - 1, 0, n - 2)
    start = np.clip(idx - 1, 0, n - 4)
    cols = start[:, None] + np.arange(4)[None, :]
    xs = g[cols]
    wts = np.ones((y.size, 4))
    for a in range(4):
        for b in range(4):
            if a != b:
                wts[:, a] *= (yc - xs[:, b]) / (xs[:, a] - xs[:, b])
    if extrap == "linear" and not np.all(inside):
        lcols, lwts = _linear_weights(g, y, "linear")
        out = ~inside
        cols = cols.copy()
        wts = wts.copy()
        cols[out] = np.hstack([lcols[out], lcols[out]])
        wts[out] = np.hstack([lwts[out], np.zeros((out.sum(), 2))])
    return cols, wts


def interpolation_matrix(grid: Grid, points: np.ndarray, interp: str = "multilinear",
                         extrap: str = "clamp") -> sp.csr_matrix:
    """Sparse matrix S with ``S @ values`` = interpolated values at ``points``.

    ``points`` has shape (m, dims).  Rows of S sum to one; with
    multilinear/clamp all entries are non-negative.
    """
    if interp not in INTERP_METHODS:
        raise ValueError(f"unknown interpolation {interp!r}")
    if extrap not in EXTRAP_METHODS:
        raise ValueError(f"unknown extrapolation {extrap!r}")
    points = np.asarray(points, dtype=float).reshape(-1, grid.dims)
    if np.isnan(points).any():
        bad = np.argwhere(np.isnan(points).any(axis=1))[0, 0]
        raise DomainEvaluationError(f"NaN evaluation point at row {bad}")
    m = points.shape[0]
    per_dim = []
    for k, g in enumerate(grid.nodes_per_dim):
        fn = _linear_weights if interp == "multilinear" else _cubic_weights
        per_dim.append(fn(g, points[:, k], extrap))
    shape = grid.shape
    stencil = per_dim[0][0].shape[1]
    rows_all, cols_all, vals_all = [], [], []
    rows = np.arange(m)
    for combo in product(range(stencil), repeat=grid.dims):
        flat = np.zeros(m, dtype=np.int64)
        w = np.ones(m)
        for k, c in enumerate(combo):
            cols_k, wts_k = per_dim[k]
            flat = flat * shape[k] + cols_k[:, c]
            w = w * wts_k[:, c]
        keep = w != 0.0
        rows_all.append(rows[keep])
        cols_all.append(flat[keep])
        vals_all.append(w[keep])
    S = sp.csr_matrix(
        (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
        shape=(m, grid.size),
    )
    S.sum_duplicates()
    return S


@dataclass(frozen=True, eq=False)
class GridFn:
    """Real-valued function on a :class:`Grid` with an interpolation rule."""

    grid: Grid
    values: np.ndarray
    interp: str = "multilinear"
    extrap: str = "clamp"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1).copy()
        if v.size != self.grid.size:
            raise ValueError(f"expected {self.grid.size} values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise DomainEvaluationError("GridFn values must be finite at every node")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.interp not in INTERP_METHODS or self.extrap not in EXTRAP_METHODS:
            raise ValueError("bad interpolation/extrapolation choice")

    @classmethod
    def constant(cls, grid: Grid, c: float, **kw) -> "GridFn":
        return cls(grid, np.full(grid.size, float(c)), **kw)

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[np.ndarray], np.ndarray], **kw) -> "GridFn":
        return cls(grid, np.asarray(fn(grid.points), dtype=float), **kw)

    def with_values(self, values) -> "GridFn":
        return GridFn(self.grid, values, self.interp, self.extrap)

    def matrix(self, points) -> sp.csr_matrix:
        return interpolation_matrix(self.grid, points, self.interp, self.extrap)

    def __call__(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=float)
        d = self.grid.dims
        if d == 1:
            shape = x.shape[:-1] if x.ndim >= 2 and x.shape[-1] == 1 else x.shape
        else:
            shape = x.shape[:-1]
        out = self.matrix(x.reshape(-1, d)) @ self.values
        return float(out[0]) if shape == () else out.reshape(shape)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def to_csv(self, path=None, value_name: str = "value") -> str:
        """Write d coordinate columns then one value column, grid order."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*self.grid.names, value_name])
        for p, v in zip(self.grid.points, self.values):
            w.writerow([repr(float(c)) for c in p] + [repr(float(v))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path, interp: str = "multilinear", extrap: str = "clamp") -> "GridFn":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        d = len(header) - 1
        coords = body[:, :d]
        nodes = tuple(np.unique(coords[:, k]) for k in range(d))
        grid = Grid(nodes, tuple(header[:d]))
        if not np.allclose(grid.points, coords, rtol=0, atol=0):
            raise ValueError("CSV rows are not a full tensor grid in row-major order")
        return cls(grid, body[:, d], interp, extrap)


def interp_eval(f: GridFn, x) -> float:
    """Evaluate ``f`` at a single point ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.isnan(x).any():
        raise DomainEvaluationError(f"cannot evaluate at NaN point {x.tolist()}")
    return float((f.matrix(x.reshape(1, -1)) @ f.values)[0])


@dataclass(frozen=True, eq=False)
class GaussHermiteRule:
    """Gauss-Hermite nodes and weights for the weight function exp(-z**2)."""

    order: int
    nodes: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if int(self.order) < 1:
            raise ValueError("order must be a positive integer")
        z, w = hermgauss(int(self.order))
        object.__setattr__(self, "nodes", z)
        object.__setattr__(self, "weights", w)

    def standard_normal(self, d: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Tensor nodes (n**d, d) and probability weights for N(0, I_d)."""
        z = np.sqrt(2.0) * self.nodes
        p = self.weights / np.sqrt(np.pi)
        if d == 1:
            return z[:, None], p.copy()
        mesh = np.meshgrid(*([z] * d), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        wts = p
        for _ in range(d - 1):
            wts = np.multiply.outer(wts, p).ravel()
        return pts, wts


def gh_expectation(rule: GaussHermiteRule, mean, chol_cov, integrand: Callable) -> float:
    """E[integrand(X)] for X ~ N(mean, L L') by tensor Gauss-Hermite.

    ``integrand`` is called once with an array of shape (n**d, d).
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    L = np.atleast_2d(np.asarray(chol_cov, dtype=float))
    if np.any(np.diag(L) <= 0):
        raise ValueError("chol_cov must have a strictly positive diagonal")
    z, p = rule.standard_normal(mean.size)
    x = mean + z @ L.T
    vals = np.asarray(integrand(x), dtype=float).reshape(-1)
    bad = ~np.isfinite(vals)
    if bad.any():
        raise DomainEvaluationError(f"integrand not finite at node {x[np.argmax(bad)].tolist()}")
    return float(p @ vals)


def _as_operator(apply_K):
    if sp.issparse(apply_K) or isinstance(apply_K, np.ndarray):
        return lambda v: apply_K @ v
    return apply_K


def neumann_solve(apply_K, rhs: GridFn | np.ndarray, tol: float = 1e-12, max_terms: int = 100_000,
                  window: int = 50) -> GridFn | np.ndarray:
    """Solve ``f = K f + rhs`` by summing ``K**n rhs``.

    ``apply_K`` is a matrix or a callable mapping node values to node values
    (a GridFn-to-GridFn callable is also accepted).  Stops when the last
    term's sup-norm is below ``tol``.  Raises :class:`DivergenceError`
    when term norms fail to decrease over ``window`` consecutive terms.
    """
    as_fn = isinstance(rhs, GridFn)
    b = rhs.values if as_fn else np.asarray(rhs, dtype=float)
    K = _as_operator(apply_K)

    def step(v):
        if as_fn:
            out = K(rhs.with_values(v))
            return out.values if isinstance(out, GridFn) else np.asarray(out)
        return np.asarray(K(v))

    total = b.copy()
    term = b.copy()
    best = np.max(np.abs(term)) if term.size else 0.0
    stalled = 0
    for _ in range(max_terms):
        if np.max(np.abs(term), initial=0.0) < tol:
            break
        term = step(term)
        total += term
        norm = float(np.max(np.abs(term), initial=0.0))
        if not np.isfinite(norm):
            raise DivergenceError("Neumann series produced non-finite terms")
        if norm < best:
            best = norm
            stalled = 0
        else:
            stalled += 1
            if stalled >= window:
                raise DivergenceError(
                    f"Neumann terms stopped decreasing for {window} steps (|term|={norm:.3e}); "
                    "spectral radius of K appears >= 1")
    else:
        raise DivergenceError(f"Neumann series not converged after {max_terms} terms")
    return rhs.with_values(total) if as_fn else total


def dense_solve(K, rhs: GridFn | np.ndarray) -> GridFn | np.ndarray:
    """Solve ``(I - K) f = rhs`` directly; K is a (sparse or dense) matrix."""
    as_fn = isinstance(rhs, GridFn)
    b = rhs.values if as_fn else np.asarray(rhs, dtype=float)
    n = b.size
    if n > DENSE_LIMIT:
        raise ValueError(f"dense solve refused for {n} > {DENSE_LIMIT} points")
    Kd = K.toarray() if sp.issparse(K) else np.asarray(K)
    x = np.linalg.solve(np.eye(n) - Kd, b)
    return rhs.with_values(x) if as_fn else x
