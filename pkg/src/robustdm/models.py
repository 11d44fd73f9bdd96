"""
Benchmark Markov transition laws.

Every model exposes the same small surface used by the solvers:

``log_cond_density(x_next, x)``
    vectorized log transition density.
``transition_nodes(x, rule)``
    quadrature nodes for X' given each row of ``x``: points of shape
    (n, q, d) and log-probability weights of shape (n, q).
``cond_expectation(x, g, rule)``
    E[g(X') | X = x] built on ``transition_nodes``.
``stationary_density``, ``sample_stationary``, ``simulate``.

Gaussian models are integrated with tensor Gauss-Hermite rules; the
autoregressive gamma model uses a truncated Poisson mixture of
generalized Gauss-Laguerre rules.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg, signal, special, stats

from .errors import FilterDegeneracyError, MGFDomainError, ModelSpecError
from .numgrid import DEFAULT_GH_ORDER, GaussHermiteRule

LOG_2PI = np.log(2.0 * np.pi)


def _mat(a, d: int | None = None) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if d is not None and a.shape != (d, d):
        raise ModelSpecError(f"expected a {d}x{d} matrix, got shape {a.shape}")
    return a


def _vec(a) -> np.ndarray:
    return np.atleast_1d(np.asarray(a, dtype=float)).reshape(-1)


def _is_pd(S: np.ndarray) -> bool:
    if not np.allclose(S, S.T, atol=1e-10 * max(1.0, np.abs(S).max())):
        return False
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return False
    return True


def _spectral_radius(A: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Log N(x; mean, L L') for rows of ``x`` (broadcast against ``mean``)."""
    diff = np.asarray(x, dtype=float) - mean
    d = chol.shape[0]
    z = linalg.solve_triangular(chol, diff.reshape(-1, d).T, lower=True).T
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    with np.errstate(over="ignore"):
        # far-out points underflow to a log density of -inf
        out = -0.5 * (np.sum(z**2, axis=1) + logdet + d * LOG_2PI)
    return out.reshape(diff.shape[:-1])


def _rows(x, d: int) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(-1, d)


def _points(x, d: int) -> tuple[np.ndarray, tuple]:
    """Rows of evaluation points and the output shape (GridFn convention)."""
    x = np.asarray(x, dtype=float)
    if d == 1:
        shape = x.shape[:-1] if x.ndim >= 2 and x.shape[-1] == 1 else x.shape
    else:
        shape = x.shape[:-1]
    return x.reshape(-1, d), shape


def _scalarize(out):
    return float(out) if np.ndim(out) == 0 else out


def _gh(rule: GaussHermiteRule | None) -> GaussHermiteRule:
    return rule if rule is not None else GaussHermiteRule(DEFAULT_GH_ORDER)


class _Model:
    """Shared helpers; subclasses define ``dim`` and ``transition_nodes``."""

    dim: int

    def cond_density(self, x_next, x) -> np.ndarray | float:
        out = np.exp(self.log_cond_density(x_next, x))
        return float(out) if np.ndim(out) == 0 else out

    def cond_expectation(self, x, g: Callable, rule: GaussHermiteRule | None = None):
        """E[g(X') | X = x]; ``g`` maps an (m, d) array to m values."""
        xr = _rows(x, self.dim)
        pts, logw = self.transition_nodes(xr, rule)
        vals = np.asarray(g(pts.reshape(-1, self.dim)), dtype=float).reshape(logw.shape)
        out = np.sum(np.exp(logw) * vals, axis=1)
        return float(out[0]) if np.ndim(x) <= 1 and xr.shape[0] == 1 else out

    def simulate(self, x0, T: int, seed=None) -> np.ndarray:
        """Path of shape (T, d) starting at ``x0`` (row 0)."""
        if T < 1:
            raise ValueError("T must be at least 1")
        rng = np.random.default_rng(seed)
        path = np.empty((T, self.dim))
        path[0] = _vec(x0)
        for t in range(1, T):
            path[t] = self.step(path[t - 1], rng)
        return path


@dataclass(frozen=True, eq=False)
class LGModel(_Model):
    """Linear-Gaussian VAR ``X' = mu + A X + sigma eps``.

    ``sigma`` exactly zero is accepted as a deterministic model (useful for
    simulation checks); densities then raise.
    """

    mu: np.ndarray
    A: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = _vec(self.mu)
        d = mu.size
        A = _mat(self.A, d)
        sigma = _mat(self.sigma, d)
        if _spectral_radius(A) >= 1.0:
            raise ModelSpecError("all eigenvalues of A must lie strictly inside the unit circle")
        cov = sigma @ sigma.T
        if np.any(sigma != 0) and not _is_pd(cov):
            raise ModelSpecError("sigma sigma' must be positive definite")
        _freeze(mu, A, sigma, cov)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "_cov", cov)

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def shock_cov(self) -> np.ndarray:
        return self._cov

    @property
    def degenerate(self) -> bool:
        return not np.any(self.sigma != 0)

    def cond_mean(self, x) -> np.ndarray:
        return self.mu + _rows(x, self.dim) @ self.A.T

    def _chol(self) -> np.ndarray:
        if self.degenerate:
            raise ModelSpecError("degenerate (sigma = 0) model has no density")
        return np.linalg.cholesky(self._cov)

    def log_cond_density(self, x_next, x):
        return gaussian_logpdf(np.asarray(x_next, dtype=float),
                               self.mu + np.asarray(x, dtype=float) @ self.A.T, self._chol())

    def transition_nodes(self, x, rule=None):
        xr = _rows(x, self.dim)
        z, p = _gh(rule).standard_normal(self.dim)
        pts = self.cond_mean(xr)[:, None, :] + (z @ self.sigma.T)[None, :, :]
        logw = np.broadcast_to(np.log(p), (xr.shape[0], p.size)).copy()
        return pts, logw

    @property
    def stationary_mean(self) -> np.ndarray:
        return np.linalg.solve(np.eye(self.dim) - self.A, self.mu)

    @property
    def stationary_cov(self) -> np.ndarray:
        return linalg.solve_discrete_lyapunov(self.A, self._cov)

    def stationary_logpdf(self, x):
        pts, shape = _points(x, self.dim)
        out = gaussian_logpdf(pts, self.stationary_mean, np.linalg.cholesky(self.stationary_cov))
        return out.reshape(shape)

    def stationary_density(self, x):
        return _scalarize(np.exp(self.stationary_logpdf(x)))

    def sample_stationary(self, n: int, rng: np.random.Generator) -> np.ndarray:
        L = np.linalg.cholesky(self.stationary_cov)
        return self.stationary_mean + rng.standard_normal((n, self.dim)) @ L.T

    def step(self, x, rng):
        return self.mu + self.A @ x + self.sigma @ rng.standard_normal(self.dim)

    def sample_next(self, x, rng: np.random.Generator) -> np.ndarray:
        """One transition from every row of ``x``."""
        xr = _rows(x, self.dim)
        return self.cond_mean(xr) + rng.standard_normal(xr.shape) @ self.sigma.T

    def simulate(self, x0, T: int, seed=None) -> np.ndarray:
        if T < 1:
            raise ValueError("T must be at least 1")
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal((T - 1, self.dim)) @ self.sigma.T
        x0 = _vec(x0)
        if self.dim == 1:
            a = self.A[0, 0]
            rest = signal.lfilter([1.0], [1.0, -a], self.mu[0] + eps[:, 0], zi=[a * x0[0]])[0]
            return np.concatenate([x0, rest])[:, None]
        path = np.empty((T, self.dim))
        path[0] = x0
        for t in range(1, T):
            path[t] = self.mu + self.A @ path[t - 1] + eps[t - 1]
        return path

    def with_mean_shift(self, delta) -> "LGModel":
        return LGModel(self.mu + _vec(delta), self.A, self.sigma)

    def to_dict(self) -> dict:
        return {"type": "lg", "mu": self.mu.tolist(), "A": self.A.tolist(), "sigma": self.sigma.tolist()}


@dataclass(frozen=True, eq=False)
class MoEModel(_Model):
    """Mixture-of-experts Gaussian VAR.

    Component ``k`` forecasts ``X' ~ N((I - A_k) mu_k + A_k x, Sigma_k)`` with
    ``Sigma_k = Omega_k - A_k Omega_k A_k'`` and is weighted by
    ``w_k(x) = w_k phi(x; mu_k, Omega_k) / sum_i w_i phi(x; mu_i, Omega_i)``.
    """

    weights: np.ndarray
    means: np.ndarray
    A: np.ndarray
    Omega: np.ndarray

    def __post_init__(self):
        w = _vec(self.weights)
        K = w.size
        means = np.asarray(self.means, dtype=float).reshape(K, -1)
        d = means.shape[1]
        A = np.asarray(self.A, dtype=float).reshape(K, d, d)
        Om = np.asarray(self.Omega, dtype=float).reshape(K, d, d)
        if np.any(w < 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-10:
            raise ModelSpecError("mixture weights must lie in [0,1] and sum to 1")
        w = w / w.sum()
        Sig = np.empty_like(Om)
        for k in range(K):
            if _spectral_radius(A[k]) >= 1.0:
                raise ModelSpecError(f"component {k}: A has an eigenvalue outside the unit circle")
            if not _is_pd(Om[k]):
                raise ModelSpecError(f"component {k}: Omega must be symmetric positive definite")
            Sig[k] = Om[k] - A[k] @ Om[k] @ A[k].T
            Sig[k] = 0.5 * (Sig[k] + Sig[k].T)
            if not _is_pd(Sig[k]):
                raise ModelSpecError(f"component {k}: Omega - A Omega A' must be positive definite")
            if not _is_pd(self._joint(A[k], Om[k])):
                raise ModelSpecError(f"component {k}: joint pair covariance not positive definite")
        chol_S = np.linalg.cholesky(Sig)
        chol_O = np.linalg.cholesky(Om)
        _freeze(w, means, A, Om, Sig, chol_S, chol_O)
        for name, val in (("weights", w), ("means", means), ("A", A), ("Omega", Om),
                          ("_Sigma", Sig), ("_cholS", chol_S), ("_cholO", chol_O)):
            object.__setattr__(self, name, val)

    @staticmethod
    def _joint(A, Om):
        return np.block([[Om, Om @ A.T], [A @ Om, Om]])

    @classmethod
    def from_lg(cls, lg: LGModel) -> "MoEModel":
        return cls([1.0], [lg.stationary_mean], [lg.A], [lg.stationary_cov])

    @property
    def K(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def Sigma(self) -> np.ndarray:
        return self._Sigma

    def joint_cov(self, k: int) -> np.ndarray:
        return self._joint(self.A[k], self.Omega[k])

    def component_logpdf(self, x) -> np.ndarray:
        """log(w_k phi(x; mu_k, Omega_k)) with shape (n, K)."""
        xr = _rows(x, self.dim)
        cols = [np.log(self.weights[k]) + gaussian_logpdf(xr, self.means[k], self._cholO[k])
                if self.weights[k] > 0 else np.full(xr.shape[0], -np.inf) for k in range(self.K)]
        return np.stack(cols, axis=1)

    def log_mixture_weights(self, x) -> np.ndarray:
        lp = self.component_logpdf(x)
        return lp - special.logsumexp(lp, axis=1, keepdims=True)

    def mixture_weights(self, x) -> np.ndarray:
        """State-dependent weights w_k(x), shape (n, K); rows sum to one."""
        w = np.exp(self.log_mixture_weights(x))
        return w / w.sum(axis=1, keepdims=True)

    def component_means(self, x) -> np.ndarray:
        """Conditional means of each component, shape (n, K, d)."""
        xr = _rows(x, self.dim)
        I = np.eye(self.dim)
        inter = np.einsum("kij,kj->ki", I - self.A, self.means)
        return inter[None, :, :] + np.einsum("kij,nj->nki", self.A, xr)

    def cond_mean(self, x) -> np.ndarray:
        return np.einsum("nk,nkd->nd", self.mixture_weights(x), self.component_means(x))

    def log_cond_density(self, x_next, x):
        x_next = np.asarray(x_next, dtype=float)
        shape = np.broadcast_shapes(x_next.shape, np.asarray(x).shape)[:-1]
        xn = np.broadcast_to(x_next, shape + (self.dim,)).reshape(-1, self.dim)
        xr = np.broadcast_to(np.asarray(x, dtype=float), shape + (self.dim,)).reshape(-1, self.dim)
        lw = self.log_mixture_weights(xr)
        cm = self.component_means(xr)
        comp = np.stack([gaussian_logpdf(xn, cm[:, k], self._cholS[k]) for k in range(self.K)], axis=1)
        return special.logsumexp(lw + comp, axis=1).reshape(shape)

    def transition_nodes(self, x, rule=None):
        xr = _rows(x, self.dim)
        z, p = _gh(rule).standard_normal(self.dim)
        cm = self.component_means(xr)
        shocks = np.einsum("kij,qj->kqi", self._cholS, z)
        pts = cm[:, :, None, :] + shocks[None]
        logw = self.log_mixture_weights(xr)[:, :, None] + np.log(p)[None, None, :]
        n = xr.shape[0]
        return pts.reshape(n, -1, self.dim), logw.reshape(n, -1)

    def stationary_logpdf(self, x):
        pts, shape = _points(x, self.dim)
        return special.logsumexp(self.component_logpdf(pts), axis=1).reshape(shape)

    def stationary_density(self, x):
        return _scalarize(np.exp(self.stationary_logpdf(x)))

    @property
    def stationary_mean(self) -> np.ndarray:
        return self.weights @ self.means

    @property
    def stationary_cov(self) -> np.ndarray:
        m = self.stationary_mean
        second = np.einsum("k,kij->ij", self.weights, self.Omega + np.einsum("ki,kj->kij", self.means, self.means))
        return second - np.outer(m, m)

    def sample_stationary(self, n: int, rng: np.random.Generator) -> np.ndarray:
        ks = rng.choice(self.K, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[ks] + np.einsum("nij,nj->ni", self._cholO[ks], eps)

    def sample_next(self, x, rng: np.random.Generator) -> np.ndarray:
        """One transition from every row of ``x``."""
        xr = _rows(x, self.dim)
        cdf = np.cumsum(self.mixture_weights(xr), axis=1)
        ks = np.minimum((rng.random((xr.shape[0], 1)) > cdf).sum(axis=1), self.K - 1)
        means = self.component_means(xr)[np.arange(xr.shape[0]), ks]
        eps = rng.standard_normal(xr.shape)
        return means + np.einsum("nij,nj->ni", self._cholS[ks], eps)

    def step(self, x, rng):
        w = self.mixture_weights(x)[0]
        k = rng.choice(self.K, p=w)
        return self.component_means(x)[0, k] + self._cholS[k] @ rng.standard_normal(self.dim)

    def to_dict(self) -> dict:
        return {"type": "moe", "K": self.K, "weights": self.weights.tolist(), "means": self.means.tolist(),
                "A": self.A.tolist(), "Omega": self.Omega.tolist()}


@dataclass(frozen=True, eq=False)
class ARGModel(_Model):
    """Autoregressive gamma process on the positive half-line.

    ``X' | x`` is Gamma(shape ``c3 + P``, scale ``c1``) with
    ``P ~ Poisson(c2 x)``.  Conditional expectations use a truncated Poisson
    mixture of generalized Gauss-Laguerre rules with ``laguerre_order`` nodes.
    """

    c1: float
    c2: float
    c3: float
    laguerre_order: int = 30
    poisson_tail: float = 1e-15

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3) <= 0:
            raise ModelSpecError("ARG parameters must be positive")
        if self.c1 * self.c2 >= 1:
            raise ModelSpecError("ARG requires c1*c2 < 1 for stationarity")

    dim = 1

    def log_mgf(self, s, x):
        """log E[exp(s X') | X = x]; requires ``s < 1/c1``."""
        s = np.asarray(s, dtype=float)
        if np.any(s * self.c1 >= 1):
            raise MGFDomainError(f"ARG moment generating function needs s < 1/c1 = {1 / self.c1}")
        x = np.asarray(x, dtype=float)
        out = self.c1 * self.c2 * s * x / (1 - s * self.c1) - self.c3 * np.log1p(-s * self.c1)
        return float(out) if np.ndim(out) == 0 else out

    def log_cond_density(self, x_next, x):
        # a trailing state axis of length one is dropped (GridFn point convention)
        xn, xx = (a[..., 0] if a.ndim >= 2 and a.shape[-1] == 1 else a
                  for a in (np.asarray(x_next, dtype=float), np.asarray(x, dtype=float)))
        pmax = int(stats.poisson.isf(self.poisson_tail, self.c2 * max(np.max(xx), 1e-12))) + 5
        p = np.arange(pmax + 1)
        lam = self.c2 * xx[..., None]
        lp = stats.poisson.logpmf(p, lam) + stats.gamma.logpdf(xn[..., None], self.c3 + p, scale=self.c1)
        return special.logsumexp(lp, axis=-1)

    def _laguerre(self, shape: float):
        y, w = special.roots_genlaguerre(self.laguerre_order, shape - 1.0)
        with np.errstate(divide="ignore"):
            return self.c1 * y, np.log(w) - special.gammaln(shape)

    def transition_nodes(self, x, rule=None):
        xr = _rows(x, 1)[:, 0]
        if np.any(xr < 0):
            raise ModelSpecError("ARG state must be non-negative")
        pmax = int(stats.poisson.isf(self.poisson_tail, self.c2 * max(xr.max(), 1e-12))) + 5
        pts, lws = [], []
        for p in range(pmax + 1):
            y, lw = self._laguerre(self.c3 + p)
            pts.append(y)
            lws.append(lw[None, :] + stats.poisson.logpmf(p, self.c2 * xr)[:, None])
        pts = np.concatenate(pts)
        logw = np.concatenate(lws, axis=1)
        logw = logw - special.logsumexp(logw, axis=1, keepdims=True)
        return np.broadcast_to(pts[None, :, None], (xr.size, pts.size, 1)).copy(), logw

    @property
    def stationary_shape(self) -> float:
        return self.c3

    @property
    def stationary_scale(self) -> float:
        return self.c1 / (1 - self.c1 * self.c2)

    @property
    def stationary_mean(self) -> np.ndarray:
        return np.array([self.c3 * self.stationary_scale])

    @property
    def stationary_cov(self) -> np.ndarray:
        return np.array([[self.c3 * self.stationary_scale**2]])

    def stationary_density(self, x):
        x = np.asarray(x, dtype=float)
        out = stats.gamma.pdf(x[..., 0] if x.ndim > 1 else x, self.c3, scale=self.stationary_scale)
        return _scalarize(out)

    def sample_stationary(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.gamma(self.c3, self.stationary_scale, size=(n, 1))

    def sample_next(self, x, rng: np.random.Generator) -> np.ndarray:
        xr = _rows(x, 1)[:, 0]
        p = rng.poisson(self.c2 * xr)
        return rng.gamma(self.c3 + p, self.c1)[:, None]

    def step(self, x, rng):
        p = rng.poisson(self.c2 * float(np.asarray(x).reshape(-1)[0]))
        return np.array([rng.gamma(self.c3 + p, self.c1)])

    def to_dict(self) -> dict:
        return {"type": "arg", "c1": self.c1, "c2": self.c2, "c3": self.c3}


@dataclass(frozen=True, eq=False)
class RegimeModel:
    """Hidden Markov regimes with Gaussian emissions for the observable.

    ``Lambda[i, j] = P(regime' = i | regime = j)`` (columns sum to one).
    """

    Lambda: np.ndarray
    emission_means: np.ndarray
    emission_covs: np.ndarray

    def __post_init__(self):
        L = _mat(self.Lambda)
        N = L.shape[0]
        if L.shape != (N, N) or np.any(L < 0) or not np.allclose(L.sum(axis=0), 1.0, atol=1e-12):
            raise ModelSpecError("Lambda must be a square column-stochastic matrix")
        means = np.asarray(self.emission_means, dtype=float).reshape(N, -1)
        m = means.shape[1]
        covs = np.asarray(self.emission_covs, dtype=float).reshape(N, m, m)
        for k in range(N):
            if not _is_pd(covs[k]):
                raise ModelSpecError(f"emission covariance of regime {k} must be positive definite")
        chol = np.linalg.cholesky(covs)
        _freeze(L, means, covs, chol)
        for name, val in (("Lambda", L), ("emission_means", means), ("emission_covs", covs), ("_chol", chol)):
            object.__setattr__(self, name, val)

    @property
    def N(self) -> int:
        return self.Lambda.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.emission_means.shape[1]

    def emission_logpdf(self, phi) -> np.ndarray:
        """log q(phi | regime) for rows of ``phi``: shape (n, N)."""
        pr = _rows(phi, self.obs_dim)
        return np.stack([gaussian_logpdf(pr, self.emission_means[k], self._chol[k]) for k in range(self.N)], axis=1)

    def emission_nodes(self, rule=None) -> tuple[np.ndarray, np.ndarray]:
        """Per-regime quadrature nodes (N, q, m) and probability weights (q,)."""
        z, p = _gh(rule).standard_normal(self.obs_dim)
        pts = self.emission_means[:, None, :] + np.einsum("kij,qj->kqi", self._chol, z)
        return pts, p

    def stationary_probs(self) -> np.ndarray:
        vals, vecs = np.linalg.eig(self.Lambda)
        v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
        return v / v.sum()

    def simulate(self, T: int, seed=None, xi0: int | None = None):
        """Regimes (T,) and observations (T, m) drawn jointly."""
        rng = np.random.default_rng(seed)
        regimes = np.empty(T, dtype=int)
        regimes[0] = rng.choice(self.N, p=self.stationary_probs()) if xi0 is None else xi0
        for t in range(1, T):
            regimes[t] = rng.choice(self.N, p=self.Lambda[:, regimes[t - 1]])
        eps = rng.standard_normal((T, self.obs_dim))
        obs = self.emission_means[regimes] + np.einsum("tij,tj->ti", self._chol[regimes], eps)
        return regimes, obs

    def to_dict(self) -> dict:
        return {"type": "regime", "Lambda": self.Lambda.tolist(), "emission_means": self.emission_means.tolist(),
                "emission_covs": self.emission_covs.tolist()}


def regime_filter_step(model: RegimeModel, xi_tilde, phi_next) -> np.ndarray:
    """Bayes update then regime transition: Lambda (q * xi) / 1'(q * xi)."""
    xi = _vec(xi_tilde)
    lq = model.emission_logpdf(phi_next)[0]
    if not np.any(np.isfinite(lq)) or np.all(lq == -np.inf):
        raise FilterDegeneracyError("every emission density vanishes at the observation")
    q = np.exp(lq - lq.max())
    post = q * xi
    total = post.sum()
    if total <= 0 or not np.isfinite(total):
        raise FilterDegeneracyError("posterior mass vanished at the observation")
    out = model.Lambda @ (post / total)
    out = np.clip(out, 0.0, None)
    return out / out.sum()


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    """Gaussian state space: ``phi' = A xi + u'``, ``xi' = B xi + w'``."""

    A: np.ndarray
    B: np.ndarray
    Sigma_u: np.ndarray
    Sigma_w: np.ndarray

    def __post_init__(self):
        B = _mat(self.B)
        n = B.shape[0]
        A = np.asarray(self.A, dtype=float).reshape(-1, n)
        m = A.shape[0]
        Su = _mat(self.Sigma_u, m)
        Sw = _mat(self.Sigma_w, n)
        if _spectral_radius(B) >= 1:
            raise ModelSpecError("eigenvalues of B must lie inside the unit circle")
        for name, S in (("Sigma_u", Su), ("Sigma_w", Sw)):
            if not np.allclose(S, S.T) or np.min(np.linalg.eigvalsh(S)) < -1e-12:
                raise ModelSpecError(f"{name} must be symmetric positive semidefinite")
        _freeze(A, B, Su, Sw)
        for name, val in (("A", A), ("B", B), ("Sigma_u", Su), ("Sigma_w", Sw)):
            object.__setattr__(self, name, val)

    @property
    def state_dim(self) -> int:
        return self.B.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.A.shape[0]

    def to_dict(self) -> dict:
        return {"type": "statespace", "A": self.A.tolist(), "B": self.B.tolist(),
                "Sigma_u": self.Sigma_u.tolist(), "Sigma_w": self.Sigma_w.tolist()}


@dataclass(frozen=True, eq=False)
class UtilityGrowth:
    """Utility growth ``u(x, x') = a0 + lambda0'x + lambda1'x'`` or a callback.

    When ``callback`` is given it takes broadcastable arrays ``(x, x_next)``
    with a trailing state dimension and returns values without it.
    """

    a0: float = 0.0
    lambda0: np.ndarray | None = None
    lambda1: np.ndarray | None = None
    callback: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        for name in ("lambda0", "lambda1"):
            val = getattr(self, name)
            if val is not None:
                v = _vec(val)
                v.setflags(write=False)
                object.__setattr__(self, name, v)
        object.__setattr__(self, "a0", float(self.a0))

    @property
    def is_affine(self) -> bool:
        return self.callback is None

    def coefficients(self, d: int) -> tuple[float, np.ndarray, np.ndarray]:
        z = np.zeros(d)
        l0 = z if self.lambda0 is None else self.lambda0
        l1 = z if self.lambda1 is None else self.lambda1
        if l0.size != d or l1.size != d:
            raise ModelSpecError(f"utility coefficients must have length {d}")
        return self.a0, l0, l1

    def __call__(self, x, x_next) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        x_next = np.asarray(x_next, dtype=float)
        if self.callback is not None:
            return np.asarray(self.callback(x, x_next), dtype=float)
        a0, l0, l1 = self.coefficients(x.shape[-1])
        return a0 + x @ l0 + x_next @ l1

    def scaled(self, c: float) -> "UtilityGrowth":
        if self.callback is not None:
            cb = self.callback
            return UtilityGrowth(callback=lambda x, y: c * cb(x, y))
        return UtilityGrowth(c * self.a0, None if self.lambda0 is None else c * self.lambda0,
                             None if self.lambda1 is None else c * self.lambda1)

    def to_dict(self) -> dict:
        if self.callback is not None:
            raise ValueError("callback utilities cannot be serialized")
        return {"a0": self.a0,
                "lambda0": None if self.lambda0 is None else self.lambda0.tolist(),
                "lambda1": None if self.lambda1 is None else self.lambda1.tolist()}


BenchmarkModel = LGModel | MoEModel | ARGModel


def model_from_dict(doc: dict):
    """Build a model from its JSON document (``type`` selects the class)."""
    kind = doc.get("type")
    fields = {k: v for k, v in doc.items() if k not in ("type", "K")}
    try:
        cls = {"lg": LGModel, "moe": MoEModel, "arg": ARGModel, "regime": RegimeModel,
               "statespace": StateSpaceModel}[kind]
    except KeyError:
        raise ModelSpecError(f"unknown model type {kind!r}") from None
    if kind == "moe" and "K" in doc and len(doc["weights"]) != doc["K"]:
        raise ModelSpecError("K does not match the number of weights")
    return cls(**fields)


def save_model(model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def read_series(path) -> tuple[list[str], list[str] | None, np.ndarray]:
    """Read a time-series CSV; an optional leading ``date`` column is kept as labels.

    Returns variable names, date labels (or None) and data of shape (T, d).
    Non-numeric or non-finite cells raise ``ValueError`` naming the file line.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    has_date = header[0].lower() == "date"
    names = header[1:] if has_date else header
    dates, data = ([] if has_date else None), []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValueError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        cells = row[1:] if has_date else row
        try:
            vals = [float(c) for c in cells]
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: non-numeric value") from None
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"{path}: line {lineno}: non-finite value")
        if has_date:
            dates.append(row[0])
        data.append(vals)
    return names, dates, np.array(data, dtype=float).reshape(len(data), len(names))


def write_series(path, data, names, dates=None) -> None:
    data = np.asarray(data, dtype=float).reshape(len(data), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["date"] if dates is not None else []) + list(names))
        for i, row in enumerate(data):
            w.writerow(([dates[i]] if dates is not None else []) + [repr(float(v)) for v in row])
