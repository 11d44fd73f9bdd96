"""
First-order effects of replacing the benchmark model by a nearby one.

For an alternative law ``Qhat`` the pairwise log-likelihood ratio
``l = log(qhat/q)`` is centered into a score ``eta = l - E^Q[l | x]``; the
value function then moves by approximately ``sum_{n>=1} (beta E_v)^n eta``.
Scores live on the solver's (grid node, quadrature node) pairs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import AbsoluteContinuityError, DivergenceError
from .kernel import Kernel, build_kernel
from .models import LGModel, UtilityGrowth
from .numgrid import Grid, GridFn
from .robust import Distortion, Preferences, RobustSolution, T_values, lg_closed_form, solve


@dataclass(frozen=True, eq=False)
class ScorePair:
    """Log-likelihood ratio, centered score and its cumulant on kernel nodes."""

    ell: np.ndarray
    eta: np.ndarray
    kappa: np.ndarray

    def centering_error(self, kernel: Kernel) -> float:
        return float(np.max(np.abs(kernel.expect_pairs(self.eta))))


@dataclass(frozen=True, eq=False)
class ShiftedModel:
    """Benchmark law with the next state translated by ``delta``: X' = X'_base + delta."""

    base: object
    delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "delta", np.atleast_1d(np.asarray(self.delta, dtype=float)))

    @property
    def dim(self) -> int:
        return self.delta.size

    def log_cond_density(self, x_next, x):
        return self.base.log_cond_density(np.asarray(x_next, dtype=float) - self.delta, x)

    def transition_nodes(self, x, rule=None):
        pts, logw = self.base.transition_nodes(x, rule)
        return pts + self.delta, logw

    def sample_next(self, x, rng):
        return self.base.sample_next(x, rng) + self.delta


def score_from_models(Q, Qhat, kernel: Kernel) -> ScorePair:
    """Score of ``Qhat`` relative to ``Q`` at the quadrature nodes of ``kernel`` (built for ``Q``)."""
    x = np.broadcast_to(kernel.grid.points[:, None, :], kernel.points.shape)
    lq = Q.log_cond_density(kernel.points, x)
    lqh = Qhat.log_cond_density(kernel.points, x)
    live = kernel.logw > -np.inf
    bad = live & ~(np.isfinite(lq) & np.isfinite(lqh))
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise AbsoluteContinuityError(
            f"zero density at node {kernel.grid.points[i].tolist()} -> {kernel.points[i, j].tolist()}")
    ell = np.where(live, lqh - lq, 0.0)
    eta = ell - kernel.expect_pairs(ell)[:, None]
    return ScorePair(ell, eta, kernel.log_expect_exp(eta))


def first_order_v(dist: Distortion, score: ScorePair, terms: int = 200, tol: float = 1e-10,
                  window: int = 20) -> GridFn:
    """Truncated sum_{n>=1} (beta E_v)^n eta.

    The first term applies beta E_v to the pair function eta; later terms
    iterate beta E_v on the resulting grid function.
    """
    beta = dist.prefs.beta
    term = beta * dist.expect_v_pairs(score.eta)
    total = term.copy()
    best = np.max(np.abs(term))
    stalled = 0
    for _ in range(1, terms):
        norm = float(np.max(np.abs(term)))
        if norm < tol:
            break
        term = beta * dist.expect_v(term)
        total += term
        if norm < best:
            best, stalled = norm, 0
        else:
            stalled += 1
            if stalled >= window:
                raise DivergenceError("perturbation series terms are not decaying")
    k = dist.kernel
    return GridFn(k.grid, total, k.interp, k.extrap)


@dataclass(frozen=True)
class LipschitzEntry:
    one_step: float
    full: float
    ratio: float
    sign_agreement: float


@dataclass(frozen=True)
class LipschitzReport:
    entries: tuple
    max_ratio: float
    min_ratio: float
    blowup: bool

    def to_dict(self) -> dict:
        return {"entries": [e.__dict__ for e in self.entries], "max_ratio": self.max_ratio,
                "min_ratio": self.min_ratio, "blowup": self.blowup}


def lipschitz_probe(base: RobustSolution, perturbations, mask: np.ndarray | None = None,
                    blowup: float = 1e3, zero_tol: float | None = None) -> LipschitzReport:
    """Compare |T_hat v - v| with |v_hat - v| for each alternative model.

    Norms are sup-norms over ``mask`` (default: all nodes).  Norms below
    ``zero_tol`` (default 10x the base solver tolerance bound, taken as the
    larger of 1e-8 and 10x the base residual) count as zero; both zero gives
    a ratio of one.
    """
    if zero_tol is None:
        zero_tol = max(1e-8, 10.0 * base.report.residual)
    k0 = base.kernel
    mask = np.ones(k0.n, dtype=bool) if mask is None else mask
    v = base.v.values
    out = []
    for Qhat in perturbations:
        kh = build_kernel(Qhat, k0.grid, base.u, None, k0.interp, k0.extrap) if Qhat is not base.model else k0
        one = T_values(kh, base.prefs.alpha, base.prefs.beta, v) - v
        vh = solve(Qhat, base.prefs, base.u, kernel=kh).v.values
        full = vh - v
        a, b = float(np.max(np.abs(one[mask]))), float(np.max(np.abs(full[mask])))
        a, b = (0.0 if a < zero_tol else a), (0.0 if b < zero_tol else b)
        ratio = 1.0 if a == 0 and b == 0 else (np.inf if a == 0 else b / a)
        big = (np.abs(one) > 1e-12) & (np.abs(full) > 1e-12) & mask
        agree = float(np.mean(np.sign(one[big]) == np.sign(full[big]))) if big.any() else 1.0
        out.append(LipschitzEntry(a, b, ratio, agree))
    ratios = [e.ratio for e in out] or [1.0]
    return LipschitzReport(tuple(out), max(ratios), min(ratios),
                           bool(max(ratios) > blowup or min(ratios) < 1 / blowup))


# stochastic volatility -----------------------------------------------------------

@dataclass(frozen=True)
class AR1LogVol:
    """Gaussian AR(1) ``h' = c + rho h + s eps``; ``s = 0`` and ``rho = 1`` keeps h constant."""

    c: float = 0.0
    rho: float = 0.0
    s: float = 0.0

    def expect_exp_neg(self, h: np.ndarray, i: int) -> np.ndarray:
        """E[exp(-h_{t+i}) | h_t = h]."""
        r = self.rho**i
        mean_shift = self.c * (i if self.rho == 1 else (1 - r) / (1 - self.rho))
        var = self.s**2 * (i if abs(self.rho) == 1 else (1 - r * r) / (1 - self.rho**2))
        return np.exp(-(mean_shift + r * np.asarray(h, dtype=float)) + 0.5 * var)


def sv_correction(h: np.ndarray, expect_exp_neg: Callable[[np.ndarray, int], np.ndarray], beta: float,
                  quad: float, terms: int = 2000, tol: float = 1e-14) -> np.ndarray:
    """-(beta/2) sum_i beta^i (E[exp(-h_{t+i}) | h] - 1) * quad."""
    h = np.asarray(h, dtype=float)
    total = np.zeros_like(h)
    disc = 1.0
    for i in range(terms):
        term = disc * (expect_exp_neg(h, i) - 1.0)
        total += term
        disc *= beta
        if np.max(np.abs(term), initial=0.0) < tol and i > 0:
            break
    else:
        raise DivergenceError("volatility series did not converge")
    return -0.5 * beta * quad * total


def sv_perturbation(lg: LGModel, h_process, prefs: Preferences, u: UtilityGrowth, grid: Grid,
                    terms: int = 2000) -> GridFn:
    """Approximate value on an (x, h) grid for volatility-scaled shocks around the LG model.

    ``grid`` has the LG state dimensions first and h last.  ``h_process``
    exposes ``expect_exp_neg(h, i)``.
    """
    if grid.dims != lg.dim + 1:
        raise ValueError("grid must have the LG dimensions plus one volatility dimension")
    cf = lg_closed_form(lg, prefs, u)
    shift = cf.mu_star - lg.mu
    quad = float(shift @ np.linalg.solve(lg.shock_cov, shift))
    pts = grid.points
    corr = sv_correction(pts[:, -1], h_process.expect_exp_neg, prefs.beta, quad, terms)
    return GridFn(grid, cf(pts[:, :-1]) + corr)
