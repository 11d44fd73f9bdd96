"""
Continuation values of a robust decision maker.

The value function solves ``v = T v`` with

    T f(x) = beta * log E[exp(f(X') + alpha * u(x, X')) | X = x],
    alpha  = -1 / (theta * (1 - beta)).

``T`` is monotone and convex.  Iteration starts from an explicit upper bound
``v_bar`` with ``T v_bar <= v_bar`` so the iterates decrease to the smallest
fixed point, which sits above the explicit lower bound ``v_low``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .errors import AssumptionViolationError, NonConvergenceError, NumericalFailureError
from .kernel import Kernel, build_kernel, default_grid
from .models import ARGModel, LGModel, UtilityGrowth
from .numgrid import (DEFAULT_GH_ORDER, DEFAULT_NODES, DEFAULT_WIDTH, DENSE_LIMIT, GaussHermiteRule, Grid, GridFn,
                      dense_solve, neumann_solve)


@dataclass(frozen=True)
class Preferences:
    """Discount factor ``beta`` and robustness penalty ``theta`` (``inf`` = no robustness)."""

    beta: float
    theta: float

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not self.theta > 0:
            raise ValueError("theta must be positive")

    @property
    def alpha(self) -> float:
        if math.isinf(self.theta):
            return 0.0
        return -1.0 / (self.theta * (1.0 - self.beta))

    @classmethod
    def from_alpha(cls, alpha: float, beta: float) -> "Preferences":
        if alpha > 0:
            raise ValueError("alpha must be non-positive")
        theta = math.inf if alpha == 0 else -1.0 / (alpha * (1.0 - beta))
        return cls(beta, theta)


@dataclass(frozen=True)
class SolverOptions:
    grid: Grid | None = None
    nodes: int = DEFAULT_NODES
    width: float = DEFAULT_WIDTH
    gh_order: int = DEFAULT_GH_ORDER
    interp: str = "multilinear"
    extrap: str = "clamp"
    tol: float = 1e-9
    max_iters: int = 10_000
    slack: float | None = None
    restart_from_lower: bool = False
    bound_tol: float = 1e-13

    def make_grid(self, model) -> Grid:
        return self.grid if self.grid is not None else default_grid(model, self.nodes, self.width)

    @property
    def rule(self) -> GaussHermiteRule:
        return GaussHermiteRule(self.gh_order)


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    residual: float
    monotone: bool
    bounds_respected: bool
    slack: float
    converged: bool = True
    max_increase: float = 0.0
    lower_restart_gap: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("iterations", "residual", "monotone", "bounds_respected", "slack",
                                             "converged", "max_increase", "lower_restart_gap")}
        out.update(self.extra)
        return out


def make_kernel(model, u: UtilityGrowth | None, opts: SolverOptions = SolverOptions(), grid: Grid | None = None
                ) -> Kernel:
    grid = grid if grid is not None else opts.make_grid(model)
    return build_kernel(model, grid, u, opts.rule, opts.interp, opts.extrap)


# operator and bounds on a prebuilt kernel --------------------------------

def T_values(kernel: Kernel, alpha: float, beta: float, f: np.ndarray) -> np.ndarray:
    """beta * log E[exp(f(X') + alpha u)] at every node."""
    arr = kernel.at_nodes(f)
    if kernel.U is not None and alpha != 0:
        arr = arr + alpha * kernel.U
    return beta * kernel.log_expect_exp(arr)


def upper_bound_values(kernel: Kernel, alpha: float, beta: float, terms: int | None = None,
                       tol: float = 1e-13) -> np.ndarray:
    """(1-beta) sum_i beta^(i+1) log E[exp(alpha u / (1-beta)) at horizon i | x].

    Horizon terms follow L_{i+1} = log E[exp(L_i(X')) | x] in log-space.
    With ``terms=None`` the series stops once the geometric tail bound
    ``beta^(i+1) * max|L_i|`` drops below ``tol``.
    """
    if kernel.U is None or alpha == 0:
        return np.zeros(kernel.n)
    L = kernel.log_expect_exp(alpha * kernel.U / (1.0 - beta))
    if not np.all(np.isfinite(L)):
        i = int(np.argmax(~np.isfinite(L)))
        raise AssumptionViolationError(
            f"E[exp(alpha u/(1-beta))|x] is not finite at node {kernel.grid.points[i].tolist()}")
    total = np.zeros(kernel.n)
    limit = terms if terms is not None else 1_000_000
    disc = beta
    for i in range(limit):
        total += disc * L
        disc *= beta
        if terms is None and disc * np.max(np.abs(L)) / (1.0 - beta) < tol:
            break
        L = kernel.log_expect_exp(kernel.at_nodes(L))
        if not np.all(np.isfinite(L)):
            raise AssumptionViolationError(f"horizon-{i + 1} term of the upper bound is not finite")
    return (1.0 - beta) * total


def lower_bound_values(kernel: Kernel, alpha: float, beta: float) -> np.ndarray:
    """(I - beta E)^{-1} beta E[alpha u] on the grid."""
    if kernel.U is None or alpha == 0:
        return np.zeros(kernel.n)
    rhs = beta * alpha * kernel.expect_pairs(kernel.U)
    K = beta * kernel.P
    if kernel.n <= DENSE_LIMIT:
        return dense_solve(K, rhs)
    return neumann_solve(K, rhs, tol=1e-13)


def interpolation_slack(kernel: Kernel, values: np.ndarray, floor: float = 1e-10) -> float:
    """10x a multilinear interpolation error estimate from second differences of ``values``."""
    grid = kernel.grid
    arr = values.reshape(grid.shape)
    est = 0.0
    for k in range(grid.dims):
        if grid.shape[k] < 3:
            continue
        second = np.abs(np.diff(arr, n=2, axis=k))
        est += float(second.max()) / 8.0
    scale = max(1.0, float(np.max(np.abs(values))))
    if kernel.nonnegative:
        est = 0.0
    return 10.0 * est + floor * scale


# public operations --------------------------------------------------------

def apply_T(model, prefs: Preferences, u: UtilityGrowth, f: GridFn, rule: GaussHermiteRule | None = None,
            kernel: Kernel | None = None) -> GridFn:
    """One application of the robust operator to ``f`` on ``f.grid``."""
    kernel = kernel or build_kernel(model, f.grid, u, rule, f.interp, f.extrap)
    return f.with_values(T_values(kernel, prefs.alpha, prefs.beta, f.values))


def check_mgf_domain(model, u: UtilityGrowth | None, alpha: float, beta: float, horizons: int = 10_000) -> None:
    """Exact finiteness check of the upper-bound horizon terms for the ARG model with affine ``u``.

    Quadrature on a truncated rule is always finite, so a divergent Gamma
    moment generating function has to be caught analytically: every horizon
    term is affine in x with slope ``b`` and needs ``c1 * b < 1``.
    """
    if not isinstance(model, ARGModel) or u is None or not u.is_affine or alpha == 0:
        return
    _, l0, l1 = u.coefficients(1)
    s = alpha / (1.0 - beta)
    c1, c2 = model.c1, model.c2
    b = s * float(l1[0])
    for i in range(horizons):
        if c1 * b >= 1:
            raise AssumptionViolationError(
                f"E[exp(alpha u/(1-beta))] is infinite at horizon {i}: slope {b:.4g} >= 1/c1 = {1 / c1:.4g}")
        nxt = c2 * c1 * b / (1.0 - c1 * b) + (s * float(l0[0]) if i == 0 else 0.0)
        if abs(nxt - b) < 1e-15 * max(1.0, abs(b)):
            return
        b = nxt


def upper_bound_v(model, prefs: Preferences, u: UtilityGrowth, terms: int | None = None,
                  opts: SolverOptions = SolverOptions(), kernel: Kernel | None = None) -> GridFn:
    check_mgf_domain(model, u, prefs.alpha, prefs.beta)
    kernel = kernel or make_kernel(model, u, opts)
    vals = upper_bound_values(kernel, prefs.alpha, prefs.beta, terms)
    return GridFn(kernel.grid, vals, kernel.interp, kernel.extrap)


def lower_bound_v(model, prefs: Preferences, u: UtilityGrowth, opts: SolverOptions = SolverOptions(),
                  kernel: Kernel | None = None) -> GridFn:
    kernel = kernel or make_kernel(model, u, opts)
    return GridFn(kernel.grid, lower_bound_values(kernel, prefs.alpha, prefs.beta), kernel.interp, kernel.extrap)


def iterate_fixed_point(apply, start: np.ndarray, tol: float, max_iters: int, slack: float,
                        check_monotone: bool = True):
    """Picard iteration ``v <- apply(v)`` from an upper bound.

    Returns (v, iterations, residual, max_increase).  Raises when an iterate
    rises above its predecessor by more than ``slack`` or when ``max_iters``
    is exhausted.
    """
    v = start
    max_inc = 0.0
    for it in range(1, max_iters + 1):
        new = apply(v)
        if not np.all(np.isfinite(new)):
            raise NumericalFailureError(f"non-finite iterate at step {it}")
        inc = float(np.max(new - v))
        max_inc = max(max_inc, inc)
        if check_monotone and inc > slack:
            raise NumericalFailureError(f"iterate increased by {inc:.3e} > slack {slack:.3e} at step {it}")
        step = float(np.max(np.abs(new - v)))
        v = new
        if step < tol:
            residual = float(np.max(np.abs(apply(v) - v)))
            return v, it, residual, max_inc
    raise NonConvergenceError(f"no convergence after {max_iters} iterations (last step {step:.3e})")


@dataclass(frozen=True, eq=False)
class RobustSolution:
    v: GridFn
    report: SolveReport
    kernel: Kernel
    model: object
    prefs: Preferences
    u: UtilityGrowth
    upper: np.ndarray
    lower: np.ndarray

    @cached_property
    def distortion(self) -> "Distortion":
        return Distortion(self.v, self.prefs, self.model, self.u, self.kernel)


def solve_on_kernel(kernel: Kernel, alpha: float, beta: float, opts: SolverOptions = SolverOptions()
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, SolveReport]:
    """Fixed point for raw ``(alpha, beta)`` on a prebuilt kernel.

    ``alpha`` may be of either sign here; auxiliary problems need both.
    Returns (v, upper, lower, report).
    """
    if kernel.U is None or alpha == 0:
        zero = np.zeros(kernel.n)
        return zero, zero, zero, SolveReport(0, 0.0, True, True, 0.0)
    upper = upper_bound_values(kernel, alpha, beta)
    lower = lower_bound_values(kernel, alpha, beta)
    slack = opts.slack if opts.slack is not None else interpolation_slack(kernel, upper)
    slack = max(slack, opts.bound_tol * max(1.0, float(np.max(np.abs(upper)))))
    apply = lambda f: T_values(kernel, alpha, beta, f)  # noqa: E731
    v, iters, resid, max_inc = iterate_fixed_point(apply, upper, opts.tol, opts.max_iters, slack)
    bounds_ok = bool(np.all(v <= upper + slack) and np.all(v >= lower - slack))
    gap = None
    if opts.restart_from_lower:
        v_lo, *_ = iterate_fixed_point(apply, lower, opts.tol, opts.max_iters, slack, check_monotone=False)
        gap = float(np.max(np.abs(v_lo - v)))
    if resid >= opts.tol:
        warnings.warn(f"final residual {resid:.3e} above tolerance", RuntimeWarning, stacklevel=2)
    report = SolveReport(iters, resid, True, bounds_ok, float(slack), resid < opts.tol, max_inc, gap)
    return v, upper, lower, report


def solve(model, prefs: Preferences, u: UtilityGrowth, opts: SolverOptions = SolverOptions(),
          kernel: Kernel | None = None) -> RobustSolution:
    """Solve for the continuation value and keep the discretization for later use."""
    check_mgf_domain(model, u, prefs.alpha, prefs.beta)
    kernel = kernel or make_kernel(model, u, opts)
    v, upper, lower, report = solve_on_kernel(kernel, prefs.alpha, prefs.beta, opts)
    vfn = GridFn(kernel.grid, v, kernel.interp, kernel.extrap)
    return RobustSolution(vfn, report, kernel, model, prefs, u, upper, lower)


def solve_v(model, prefs: Preferences, u: UtilityGrowth, opts: SolverOptions = SolverOptions()
            ) -> tuple[GridFn, SolveReport]:
    sol = solve(model, prefs, u, opts)
    return sol.v, sol.report


# closed form ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LGClosedForm:
    a: float
    b: np.ndarray
    mu_star: np.ndarray

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.a + x @ self.b


def lg_closed_form(model: LGModel, prefs: Preferences, u: UtilityGrowth) -> LGClosedForm:
    """Affine fixed point ``a + b'x`` and worst-case intercept for the linear-Gaussian case."""
    if not u.is_affine:
        raise ValueError("closed form requires affine utility growth")
    a0, l0, l1 = u.coefficients(model.dim)
    alpha, beta = prefs.alpha, prefs.beta
    A, mu, cov = model.A, model.mu, model.shock_cov
    I = np.eye(model.dim)
    b = alpha * beta * np.linalg.solve(I - beta * A.T, l0 + A.T @ l1)
    c = alpha * l1 + b
    a = beta / (1.0 - beta) * (alpha * a0 + c @ mu + 0.5 * c @ cov @ c)
    return LGClosedForm(float(a), b, mu + cov @ c)


# distortion ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Distortion:
    """Worst-case change of measure m_v(x, x') = exp(v(x') + alpha u(x, x') - v(x)/beta)."""

    v: GridFn
    prefs: Preferences
    model: object
    u: UtilityGrowth
    kernel: Kernel

    @classmethod
    def from_solution(cls, sol: RobustSolution) -> "Distortion":
        return sol.distortion

    @cached_property
    def log_m(self) -> np.ndarray:
        """log m at every (grid node, quadrature node), shape (n, q)."""
        k = self.kernel
        arr = k.at_nodes(self.v.values) - self.v.values[:, None] / self.prefs.beta
        if k.U is not None:
            arr = arr + self.prefs.alpha * k.U
        return arr

    @cached_property
    def _tilted(self):
        return self.kernel.tilted_matrix(self.log_m)

    @property
    def P_v(self) -> sp.csr_matrix:
        """Expectation matrix under the (normalized) worst-case law."""
        return self._tilted[0]

    @property
    def weights_v(self) -> np.ndarray:
        return self._tilted[1]

    def conditional_mass(self) -> np.ndarray:
        """E^Q[m_v | x] at each node (one at an exact fixed point)."""
        return np.exp(self.kernel.log_expect_exp(self.log_m))

    def normalization_error(self) -> float:
        return float(np.max(np.abs(self.conditional_mass() - 1.0)))

    def expect_v(self, values: np.ndarray) -> np.ndarray:
        return self.P_v @ values

    def expect_v_pairs(self, arr: np.ndarray) -> np.ndarray:
        return np.sum(self.weights_v * arr, axis=1)


def distortion_eval(dist: Distortion, x, x_next) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xn = np.atleast_1d(np.asarray(x_next, dtype=float))
    logm = dist.v(xn[None, :])[0] - dist.v(x[None, :])[0] / dist.prefs.beta
    logm = logm + dist.prefs.alpha * float(dist.u(x, xn))
    return float(np.exp(logm))


@dataclass(frozen=True, eq=False)
class EntropyResult:
    gamma: GridFn
    chi: GridFn
    recursion_residual: float
    method: str


def continuation_entropy(dist: Distortion, method: str = "neumann", tol: float = 1e-13,
                         interior_margin: int = 1) -> EntropyResult:
    """Solve (I - beta E_v) Gamma = chi with chi = beta E_v[log m].

    The recursion residual ``Gamma - beta E^Q[m (Gamma' + log m)]`` is
    evaluated at nodes at least ``interior_margin`` cells away from the edge.
    """
    beta = dist.prefs.beta
    chi = beta * dist.expect_v_pairs(dist.log_m)
    K = beta * dist.P_v
    if method == "neumann":
        gamma = neumann_solve(K, chi, tol=tol)
    elif method == "dense":
        gamma = dense_solve(K, chi)
    else:
        raise ValueError(f"unknown method {method!r}")
    k = dist.kernel
    m = np.exp(dist.log_m)
    rec = beta * k.expect_pairs(m * (k.at_nodes(gamma) + dist.log_m))
    mask = _interior(k.grid, interior_margin)
    resid = float(np.max(np.abs(gamma - rec)[mask])) if mask.any() else 0.0
    make = lambda vals: GridFn(k.grid, vals, k.interp, k.extrap)  # noqa: E731
    return EntropyResult(make(gamma), make(chi), resid, method)


def _interior(grid: Grid, margin: int) -> np.ndarray:
    idx = np.indices(grid.shape).reshape(grid.dims, -1).T
    return np.all((idx >= margin) & (idx <= np.array(grid.shape) - 1 - margin), axis=1)


def subgradient_radius(dist: Distortion, iters: int = 5000, tol: float = 1e-12, start: np.ndarray | None = None
                       ) -> float:
    """Power-iteration estimate of the spectral radius of beta * E_v on the grid."""
    D = dist.prefs.beta * dist.P_v
    return power_radius(D, dist.kernel.grid, iters, tol, start)


def power_radius(D, grid: Grid, iters: int = 5000, tol: float = 1e-12, start: np.ndarray | None = None) -> float:
    if start is None:
        pts = grid.points
        span = np.ptp(pts, axis=0)
        start = 1.0 + np.sum(np.abs(pts - pts.mean(axis=0)) / np.where(span > 0, span, 1.0), axis=1)
    f = start / np.max(np.abs(start))
    est = 0.0
    for _ in range(iters):
        g = D @ f
        norm = float(np.max(np.abs(g)))
        if norm == 0.0:
            return 0.0
        new = norm
        f = g / norm
        if abs(new - est) < tol * max(1.0, new):
            return new
        est = new
    return est


# Orlicz norm diagnostic -----------------------------------------------------

@dataclass(frozen=True)
class OrliczReport:
    norm: float
    finite: bool
    ladder: tuple
    tail_exponent: float

    def to_dict(self) -> dict:
        return {"norm": self.norm, "finite": self.finite, "ladder": [list(p) for p in self.ladder],
                "tail_exponent": self.tail_exponent}


def _luxemburg(vals: np.ndarray, r: float) -> float:
    a = np.abs(vals)
    if a.max() == 0:
        return 0.0

    def excess(c):
        with np.errstate(over="ignore"):
            return float(logsumexp((a / c) ** r) - np.log(a.size) - np.log(2.0))

    lo, hi = 1e-12, float(a.max())
    while excess(hi) > 0:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-10 * hi:
            break
    return hi


def weibull_tail_exponent(vals: np.ndarray, k: int | None = None) -> float:
    """Estimate kappa in -log P(|f| > t) ~ t**kappa from the top ``k`` order statistics.

    Uses the log-spacing estimator of the Weibull tail coefficient (its
    reciprocal) with ``k = sqrt(n)`` by default.  Bounded samples give inf.
    """
    a = np.sort(np.abs(np.asarray(vals, dtype=float).reshape(-1)))
    n = a.size
    k = int(np.sqrt(n)) if k is None else int(k)
    if k < 2 or k >= n or a[n - k - 1] <= 0:
        return math.inf
    spread = float(np.sum(np.log(a[n - k:]) - np.log(a[n - k - 1])))
    i = np.arange(k, 0, -1)
    scale = float(np.sum(np.log(np.log(n / i)) - np.log(np.log(n / k))))
    return math.inf if spread <= 0 else scale / spread


def orlicz_norm_mc(model, f, r: float, samples: int = 400_000, seed=0, growth_tol: float = 0.05,
                   tail_ratio: float = 0.8) -> OrliczReport:
    """Monte Carlo Luxemburg norm inf{c : E exp(|f(X, X')/c|^r) <= 2} under the stationary pair law.

    The norm is re-estimated on nested subsamples of size n/16, n/4 and n.
    It is flagged infinite when the estimate keeps growing by more than
    ``growth_tol`` (relative), or when the estimated Weibull tail exponent
    of ``|f|`` falls below ``tail_ratio * r``.  The ratio absorbs the
    downward small-sample bias of the exponent estimate for Gaussian tails.
    """
    if r < 1:
        raise ValueError("r must be at least 1")
    rng = np.random.default_rng(seed)
    x = model.sample_stationary(samples, rng)
    xn = model.sample_next(x, rng)
    vals = np.asarray(f(x, xn), dtype=float).reshape(-1)
    sizes = [samples // 16, samples // 4, samples]
    ladder = tuple((n, _luxemburg(vals[:n], r)) for n in sizes)
    cs = [c for _, c in ladder]
    growing = all(b > a * (1 + growth_tol) for a, b in zip(cs, cs[1:]))
    kappa = weibull_tail_exponent(vals) if cs[-1] > 0 else math.inf
    finite = bool(np.isfinite(cs[-1]) and not growing and kappa >= tail_ratio * r)
    return OrliczReport(cs[-1] if finite else math.inf, finite, ladder, float(kappa))


def arg_affine_roots(model, prefs: Preferences) -> list[tuple[float, float]]:
    """Both affine solutions ``a + b x`` for the autoregressive gamma model with u(x, x') = x.

    Sorted by slope; the first is the smallest fixed point.
    """
    c1, c2, c3 = model.c1, model.c2, model.c3
    alpha, beta = prefs.alpha, prefs.beta
    B = 1.0 - beta * c1 * (c2 - alpha)
    disc = B * B - 4.0 * alpha * beta * c1
    if disc < 0:
        return []
    roots = []
    for b in sorted(((B - np.sqrt(disc)) / (2 * c1), (B + np.sqrt(disc)) / (2 * c1))):
        if b * c1 < 1:
            roots.append((float(-beta * c3 * np.log1p(-b * c1) / (1 - beta)), float(b)))
    return roots
