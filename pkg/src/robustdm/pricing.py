"""
Asset-pricing and statistical-distinguishability outputs of a solved model.

The stochastic discount factor between dates t and t+1 is
``beta * exp(-gc(x, x')) * m_v(x, x')`` where ``gc`` is log consumption growth.
Every routine takes a :class:`~robustdm.robust.Distortion` built from a solved
value function.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from .errors import DomainEvaluationError
from .ident import MomentSpec, stationary_weights
from .models import LGModel, MoEModel, UtilityGrowth
from .numgrid import GridFn
from .robust import Distortion, continuation_entropy, lg_closed_form

ANNUALIZE = 400.0


@dataclass(frozen=True)
class GrowthSpec:
    """Log consumption growth ``gc`` and log earnings growth ``ge`` as affine functionals of (x, x')."""

    consumption: UtilityGrowth
    earnings: UtilityGrowth


def _gridfn(dist: Distortion, values: np.ndarray) -> GridFn:
    k = dist.kernel
    return GridFn(k.grid, values, k.interp, k.extrap)


def _pairs(dist: Distortion, f: UtilityGrowth) -> np.ndarray:
    k = dist.kernel
    x = np.broadcast_to(k.grid.points[:, None, :], k.points.shape)
    out = np.asarray(f(x, k.points), dtype=float).reshape(k.n, k.q)
    live = k.logw > -np.inf
    if not np.all(np.isfinite(out[live])):
        raise DomainEvaluationError("growth functional not finite on the quadrature support")
    return np.where(live, out, 0.0)


def _log_sdf(dist: Distortion, gc: UtilityGrowth) -> np.ndarray:
    """log(beta exp(-gc) m_v) at kernel nodes."""
    return np.log(dist.prefs.beta) - _pairs(dist, gc) + dist.log_m


# Euler equations -----------------------------------------------------------------

def euler_residual(dist: Distortion, returns: MomentSpec, gc: UtilityGrowth) -> list[GridFn]:
    """E^Q[m_v beta exp(-gc) R' | x] - 1 for each return, one GridFn per asset."""
    k = dist.kernel
    R = returns.on_nodes(k)
    sdf = np.exp(_log_sdf(dist, gc))
    resid = np.sum((k.weights * sdf)[:, :, None] * R, axis=1) - 1.0
    return [_gridfn(dist, col) for col in resid.T]


def risk_free_rate(dist: Distortion, gc: UtilityGrowth) -> GridFn:
    """Gross one-period risk-free return 1 / E^Q[m_v beta exp(-gc) | x]."""
    return _gridfn(dist, np.exp(-dist.kernel.log_expect_exp(_log_sdf(dist, gc))))


def exactly_priced_return(dist: Distortion, gc: UtilityGrowth) -> MomentSpec:
    """Return R' = exp(gc) / (beta m_v), priced exactly by construction (as a pair function)."""
    log_r = -_log_sdf(dist, gc)
    k = dist.kernel
    pts = k.points

    def g(x, x_next):
        if x_next.shape != pts.shape or not np.array_equal(x_next, pts):
            raise ValueError("the constructed return is only available at the kernel nodes")
        return np.exp(log_r)[:, :, None]

    return MomentSpec(g, 1)


# earnings strips -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TermStructure:
    """Cumulative and per-period strip excess returns, rows indexed by horizon 0..tau_max.

    ``cumulative[tau]`` and ``per_period[tau]`` are node-value arrays; the
    per-period value at tau=0 is zero.
    """

    horizons: np.ndarray
    cumulative: np.ndarray
    per_period: np.ndarray
    log_payoff: np.ndarray
    log_price: np.ndarray
    log_bond: np.ndarray

    def at(self, dist: Distortion, x, per_period: bool = True) -> np.ndarray:
        """Evaluate every horizon at states ``x`` by interpolation; shape (tau_max+1, m)."""
        src = self.per_period if per_period else self.cumulative
        return np.stack([np.atleast_1d(_gridfn(dist, row)(x)) for row in src])


def strip_term_structure(dist: Distortion, growth: GrowthSpec, tau_max: int) -> TermStructure:
    """Excess returns on earnings strips for horizons 0..tau_max.

    With ``E`` earnings and ``C`` consumption the horizon-tau excess return is

        log E^Q[E_{t+tau}/E_t | x] - log E_v[beta^tau (C_t/C_{t+tau}) E_{t+tau}/E_t | x]
                                   + log E_v[beta^tau (C_t/C_{t+tau}) | x].

    Each term is a multiplicative functional computed by one log-space
    operator application per horizon.
    """
    if tau_max < 0:
        raise ValueError("tau_max must be non-negative")
    k = dist.kernel
    beta = dist.prefs.beta
    ge = _pairs(dist, growth.earnings)
    gc = _pairs(dist, growth.consumption)
    logw_v = np.log(dist.weights_v, where=dist.weights_v > 0, out=np.full_like(dist.weights_v, -np.inf))
    A = np.zeros((tau_max + 1, k.n))
    B = np.zeros_like(A)
    C = np.zeros_like(A)
    for tau in range(1, tau_max + 1):
        A[tau] = logsumexp(k.logw + ge + k.at_nodes(A[tau - 1]), axis=1)
        B[tau] = np.log(beta) + logsumexp(logw_v + ge - gc + k.at_nodes(B[tau - 1]), axis=1)
        C[tau] = np.log(beta) + logsumexp(logw_v - gc + k.at_nodes(C[tau - 1]), axis=1)
    cum = A - B + C
    per = np.zeros_like(cum)
    per[1:] = cum[1:] / np.arange(1, tau_max + 1)[:, None]
    return TermStructure(np.arange(tau_max + 1), cum, per, A, B, C)


# realized series -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RealizedSeries:
    """Per-date outputs for transitions t -> t+1 (T-1 rows, dated by t)."""

    m: np.ndarray
    spread_pct_pa: np.ndarray
    gamma: np.ndarray
    weight_entropy: np.ndarray
    dates: list | None = None

    def rows(self):
        dates = self.dates if self.dates is not None else [str(t) for t in range(len(self.m))]
        return zip(dates, self.m, self.spread_pct_pa, self.gamma, self.weight_entropy)


def log_m_batch(dist: Distortion, x: np.ndarray, x_next: np.ndarray) -> np.ndarray:
    """log m_v for arrays of state pairs with shape (m, d), via interpolation of v."""
    x = np.asarray(x, dtype=float)
    xn = np.asarray(x_next, dtype=float)
    out = dist.v(xn) - dist.v(x) / dist.prefs.beta
    if dist.u is not None and dist.prefs.alpha != 0:
        out = out + dist.prefs.alpha * np.asarray(dist.u(x, xn), dtype=float)
    return np.asarray(out, dtype=float).reshape(-1)


def weight_entropy(model, x: np.ndarray) -> np.ndarray:
    """Entropy of the mixture weights at each row of ``x``; zero for single-component models."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if not isinstance(model, MoEModel) or model.K == 1:
        return np.zeros(x.shape[0])
    lw = model.log_mixture_weights(x)
    w = np.exp(lw)
    return np.maximum(-np.sum(np.where(w > 0, w * lw, 0.0), axis=1), 0.0)


def realized_series(dist: Distortion, data: np.ndarray, gc: UtilityGrowth, dates: list | None = None,
                    entropy_method: str = "neumann") -> RealizedSeries:
    """Realized distortion, pessimism spread, continuation entropy and weight entropy along ``data``.

    Row t uses the transition from ``data[t]`` to ``data[t+1]``; the
    spread is ``(E^Q[gc | x_t] - E_v[gc | x_t]) * 400``.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    k = dist.kernel
    if data.shape[1] != k.grid.dims:
        raise ValueError(f"data has {data.shape[1]} columns but the model has dimension {k.grid.dims}")
    bad = ~np.all(np.isfinite(data), axis=1)
    if bad.any():
        raise DomainEvaluationError(f"non-finite data in row {int(np.argmax(bad))}")
    if data.shape[0] < 2:
        raise ValueError("need at least two observations")
    x, xn = data[:-1], data[1:]
    if dist.prefs.alpha == 0:
        m = np.ones(len(x))
        spread = np.zeros(len(x))
        gamma = np.zeros(len(x))
    else:
        m = np.exp(log_m_batch(dist, x, xn))
        G = _pairs(dist, gc)
        diff = k.expect_pairs(G) - dist.expect_v_pairs(G)
        spread = ANNUALIZE * np.atleast_1d(_gridfn(dist, diff)(x))
        gamma = np.atleast_1d(continuation_entropy(dist, method=entropy_method).gamma(x))
    went = weight_entropy(dist.model, x)
    return RealizedSeries(m, spread, gamma, went, None if dates is None else list(dates[:-1]))


# Chernoff entropy ----------------------------------------------------------------

@dataclass(frozen=True)
class ChernoffResult:
    """One-period Chernoff entropy of the worst-case law against the benchmark.

    The pair law draws x from the benchmark stationary distribution
    (discretized on the grid) and x' from the benchmark transition.
    """

    value: float
    s_star: float
    s_grid: tuple
    objective: tuple
    convex: bool
    convention: str = "one-period, stationary benchmark pair law"

    def to_dict(self) -> dict:
        return {"value": self.value, "s_star": self.s_star, "convex": self.convex,
                "convention": self.convention}


def _log_moment(dist: Distortion, pi: np.ndarray, s: float) -> float:
    k = dist.kernel
    with np.errstate(invalid="ignore"):
        inner = logsumexp(k.logw + s * dist.log_m, axis=1)
    return float(logsumexp(inner, b=pi))


def chernoff_entropy(dist: Distortion, s_grid: int = 101, pi: np.ndarray | None = None,
                     convexity_tol: float = 1e-10) -> ChernoffResult:
    """-min_{s in (0,1)} log E[m_v^s] with a grid search refined by bounded Brent."""
    k = dist.kernel
    pi = stationary_weights(dist.model, k.grid) if pi is None else np.asarray(pi, dtype=float)
    s = np.linspace(0.0, 1.0, max(int(s_grid), 3))
    obj = np.array([_log_moment(dist, pi, si) for si in s])
    second = obj[:-2] - 2 * obj[1:-1] + obj[2:]
    convex = bool(np.all(second >= -convexity_tol * max(1.0, np.max(np.abs(obj)))))
    i = int(np.argmin(obj))
    lo, hi = s[max(i - 1, 0)], s[min(i + 1, len(s) - 1)]
    best_s, best = s[i], obj[i]
    if hi > lo:
        res = minimize_scalar(lambda t: _log_moment(dist, pi, t), bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12})
        if res.fun < best:
            best_s, best = float(res.x), float(res.fun)
    return ChernoffResult(max(-best, 0.0), float(best_s), tuple(s.tolist()), tuple(obj.tolist()), convex)


# detection error -----------------------------------------------------------------

@dataclass(frozen=True)
class DetectionResult:
    probability: float
    std_error: float
    error_benchmark: float
    error_worst_case: float
    T: int
    reps: int
    method: str
    ess_fraction: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _chunks(reps: int, size: int):
    start = 0
    while start < reps:
        yield start, min(start + size, reps)
        start += size


def _simulate_llr(sampler, log_ratio, x0, T, rng):
    x = x0
    llr = np.zeros(x0.shape[0])
    for _ in range(T):
        xn = sampler(x, rng)
        llr += log_ratio(x, xn)
        x = xn
    return llr


def detection_error(dist: Distortion, T: int, reps: int = 100_000, seed=0, chunk: int = 10_000,
                    ess_floor: float = 0.1) -> DetectionResult:
    """Average misclassification rate of the likelihood-ratio test between benchmark and worst case.

    Paths of ``T`` transitions start from the benchmark stationary law.  For
    an LG benchmark with affine utility growth the worst-case law is again
    LG with a shifted intercept and is sampled exactly.  Otherwise worst-case
    probabilities are self-normalized importance-sampling estimates with
    weights ``prod m_v``; a warning is issued when the effective sample size
    falls below ``ess_floor * reps``.  Each chunk of replications draws from
    its own stream spawned from ``seed``.
    """
    if T < 1 or reps < 1:
        raise ValueError("T and reps must be positive")
    model = dist.model
    exact = isinstance(model, LGModel) and dist.u is not None and dist.u.is_affine
    if exact:
        cf = lg_closed_form(model, dist.prefs, dist.u)
        worst = model.with_mean_shift(cf.mu_star - model.mu)

        def log_ratio(x, xn):
            return worst.log_cond_density(xn, x) - model.log_cond_density(xn, x)
    else:
        def log_ratio(x, xn):
            return log_m_batch(dist, x, xn)

    streams = np.random.SeedSequence(seed).spawn(-(-reps // chunk))
    llr_q, llr_w = [], []
    for (a, b), ss in zip(_chunks(reps, chunk), streams):
        rng = np.random.default_rng(ss)
        x0 = model.sample_stationary(b - a, rng)
        llr_q.append(_simulate_llr(model.sample_next, log_ratio, x0, T, rng))
        if exact:
            x0 = model.sample_stationary(b - a, rng)
            llr_w.append(_simulate_llr(worst.sample_next, log_ratio, x0, T, rng))
    llr_q = np.concatenate(llr_q)
    # a tied likelihood ratio is a coin flip
    err_q = (llr_q > 0) + 0.5 * (llr_q == 0)
    p_q = float(err_q.mean())
    var_q = float(err_q.var()) / reps
    if exact:
        llr_w = np.concatenate(llr_w)
        err_w = (llr_w < 0) + 0.5 * (llr_w == 0)
        p_w = float(err_w.mean())
        var_w = float(err_w.var()) / reps
        ess = 1.0
    else:
        lw = llr_q - logsumexp(llr_q)
        w = np.exp(lw)
        ind = (llr_q < 0) + 0.5 * (llr_q == 0)
        p_w = float(np.sum(w * ind))
        var_w = float(np.sum(w**2 * (ind - p_w) ** 2))
        ess = float(1.0 / np.sum(w**2)) / reps
        if ess < ess_floor:
            warnings.warn(f"importance-sampling effective sample size is {ess:.1%} of replications",
                          RuntimeWarning, stacklevel=2)
    prob = 0.5 * (p_q + p_w)
    se = 0.5 * float(np.sqrt(var_q + var_w))
    return DetectionResult(float(np.clip(prob, 0.0, 1.0)), se, p_q, p_w, int(T), int(reps),
                           "exact" if exact else "importance", ess)
