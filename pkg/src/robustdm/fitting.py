"""EM estimation of mixture-of-experts VARs and a Monte Carlo tail check."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.cluster.vq import kmeans2

from .errors import ModelSpecError, NumericalFailureError
from .models import MoEModel, gaussian_logpdf

RADIUS_CAP = 0.995


@dataclass(frozen=True)
class EMOptions:
    tol: float = 1e-8
    max_iter: int = 500
    restarts: int = 5
    seed: int = 0
    floor_scale: float = 1e-6


@dataclass(frozen=True, eq=False)
class EMResult:
    model: MoEModel
    loglik: np.ndarray
    iterations: int
    restart: int


def _pairs(data: np.ndarray) -> np.ndarray:
    return np.hstack([data[:-1], data[1:]])


def _joint(mu, A, Om):
    return np.concatenate([mu, mu]), np.block([[Om, Om @ A.T], [A @ Om, Om]])


def _project(m: np.ndarray, C: np.ndarray, d: int):
    """Map unconstrained pair moments to (mu, A, Omega) satisfying the model invariants."""
    mu = 0.5 * (m[:d] + m[d:])
    Om = 0.5 * (C[:d, :d] + C[d:, d:])
    Om = 0.5 * (Om + Om.T)
    A = np.linalg.solve(Om, C[:d, d:]).T
    rad = np.max(np.abs(np.linalg.eigvals(A)))
    if rad > RADIUS_CAP:
        A = A * (RADIUS_CAP / rad)
    for _ in range(200):
        S = Om - A @ Om @ A.T
        if np.min(np.linalg.eigvalsh(0.5 * (S + S.T))) > 1e-10 * np.trace(Om):
            break
        A = 0.95 * A
    return mu, A, Om


def _pair_logpdf(Y, mu, A, Om):
    m, C = _joint(mu, A, Om)
    return gaussian_logpdf(Y, m, np.linalg.cholesky(C))


def _loglik(Y, w, params):
    lp = np.stack([np.log(w[k]) + _pair_logpdf(Y, *params[k]) for k in range(len(w))], axis=1)
    return special.logsumexp(lp, axis=1), lp


def _moments(Y, r):
    s = r.sum()
    m = r @ Y / s
    Z = Y - m
    return m, (Z * r[:, None]).T @ Z / s


def _weighted_q(Y, r, params):
    return float(r @ _pair_logpdf(Y, *params))


def _degenerate(Om, floor):
    return np.min(np.linalg.eigvalsh(Om)) < floor


def _init(Y, K, d, rng, floor):
    seed = int(rng.integers(2**31 - 1))
    if K == 1:
        labels = np.zeros(len(Y), dtype=int)
    else:
        _, labels = kmeans2(Y, K, minit="++", seed=seed)
    params, w = [], []
    for k in range(K):
        sel = labels == k
        if sel.sum() < 2 * Y.shape[1] + 1:
            return None
        m, C = _moments(Y[sel], np.ones(sel.sum()))
        p = _project(m, C, d)
        if _degenerate(p[2], floor):
            return None
        params.append(p)
        w.append(sel.mean())
    return np.array(w), params


def run_em(data, K: int, opts: EMOptions = EMOptions()) -> EMResult:
    """Fit a K-component mixture of experts by EM on consecutive pairs.

    The observed-data pair log-likelihood is asserted to be non-decreasing at
    every iteration; component updates that would lower their expected
    complete-data log-likelihood after the invariant projection are rejected.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    T, d = data.shape
    if K < 1:
        raise ValueError("K must be positive")
    if T < 10 * K * d:
        raise ValueError(f"need at least {10 * K * d} observations, got {T}")
    if not np.all(np.isfinite(data)):
        raise ValueError("data must be finite")
    var = data.var(axis=0)
    if np.any(var <= 0) or np.linalg.matrix_rank(np.cov(data.T).reshape(d, d)) < d:
        raise ModelSpecError("data covariance is singular (constant or collinear series)")
    floor = opts.floor_scale * float(np.min(var))
    Y = _pairs(data)
    rng = np.random.default_rng(opts.seed)
    best = None
    for restart in range(max(1, opts.restarts)):
        start = _init(Y, K, d, rng, floor)
        if start is None:
            continue
        w, params = start
        try:
            result = _em_loop(Y, w, params, d, floor, opts)
        except _Degenerate:
            continue
        if best is None or result[0][-1] > best[0][-1]:
            best = (*result, restart)
        if K == 1:
            break
    if best is None:
        raise NumericalFailureError(f"EM failed: degenerate components in all {opts.restarts} restarts")
    trace, w, params, iters, restart = best
    model = MoEModel(w, [p[0] for p in params], [p[1] for p in params], [p[2] for p in params])
    return EMResult(model, np.array(trace) / len(Y), iters, restart)


class _Degenerate(Exception):
    pass


def _em_loop(Y, w, params, d, floor, opts):
    K = len(w)
    ll, lp = _loglik(Y, w, params)
    trace = [float(ll.sum())]
    it = 0
    for it in range(1, opts.max_iter + 1):
        r = np.exp(lp - ll[:, None])
        nk = r.sum(axis=0)
        if np.any(nk < 1e-8 * len(Y)):
            raise _Degenerate
        w = nk / nk.sum()
        new_params = []
        for k in range(K):
            m, C = _moments(Y, r[:, k])
            cand = _project(m, C, d)
            if _degenerate(cand[2], floor):
                raise _Degenerate
            if _weighted_q(Y, r[:, k], cand) >= _weighted_q(Y, r[:, k], params[k]):
                new_params.append(cand)
            else:
                new_params.append(params[k])
        params = new_params
        ll, lp = _loglik(Y, w, params)
        total = float(ll.sum())
        if total < trace[-1] - 1e-9 * abs(trace[-1]):
            raise NumericalFailureError(f"EM log-likelihood decreased at iteration {it}")
        trace.append(total)
        if abs(trace[-1] - trace[-2]) <= opts.tol * abs(trace[-2]):
            break
    else:
        warnings.warn("EM reached max_iter before the relative tolerance", RuntimeWarning, stacklevel=3)
    return trace, w, params, it


def fit_moe_em(data, K: int, opts: EMOptions = EMOptions()) -> MoEModel:
    """Fitted mixture-of-experts model (see :func:`run_em`)."""
    return run_em(data, K, opts).model


@dataclass(frozen=True)
class TailReport:
    passed: bool
    c_lower: float
    c_upper: float
    s_lower: float
    s_upper: float
    drift_lower: float
    drift_upper: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def tail_regularity_check(model: MoEModel, samples: int = 20_000, seed=0, stability: float = 0.1) -> TailReport:
    """Check that log f0 lies between two Gaussian envelopes on sampled points.

    Envelope constants are the min/max of ``log f0(x) + |x - m|^2 / (2 s^2)``
    over draws from the stationary law (and a wider proposal that reaches the
    tails).  The check passes when the constants are finite and move by less
    than ``stability`` when the sample is doubled.
    """
    rng = np.random.default_rng(seed)
    center = model.stationary_mean
    lo_eig = max(np.min(np.linalg.eigvalsh(Om)) for Om in model.Omega)
    hi_eig = max(np.max(np.linalg.eigvalsh(Om)) for Om in model.Omega)
    delta = 0.0 if model.K == 1 else 0.1
    s_lo = (1 - delta) * np.sqrt(lo_eig)
    s_hi = (1 + delta) * np.sqrt(hi_eig)

    def draw(n):
        a = model.sample_stationary(n, rng)
        b = center + 3.0 * np.sqrt(hi_eig) * rng.standard_normal((n, model.dim))
        return np.vstack([a, b])

    def constants(x):
        lf = model.stationary_logpdf(x.reshape(-1, model.dim)).reshape(-1)
        r2 = np.sum((x - center) ** 2, axis=1)
        return float(np.min(lf + r2 / (2 * s_lo**2))), float(np.max(lf + r2 / (2 * s_hi**2)))

    x1 = draw(samples // 2)
    x2 = np.vstack([x1, draw(samples // 2)])
    lo1, hi1 = constants(x1)
    lo2, hi2 = constants(x2)
    drift_lo, drift_hi = abs(lo2 - lo1), abs(hi2 - hi1)
    ok = all(np.isfinite([lo2, hi2])) and drift_lo < stability and drift_hi < stability
    return TailReport(bool(ok), float(np.exp(lo2)), float(np.exp(hi2)), float(s_lo), float(s_hi),
                      drift_lo, drift_hi)
