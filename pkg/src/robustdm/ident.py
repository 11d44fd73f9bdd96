"""
Identification diagnostics for (alpha, beta).

The moment map is

    rho(alpha, beta; x) = E^Q[m_v(x, X') beta g(x, X') - 1 | x],

with ``v`` re-solved at every (alpha, beta).  Its derivatives feed the local
identification matrix ``V = E^{Q0}[J J']``.  The underidentification check
constructs an alternative benchmark for a different theta under which the
worst-case law is unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .kernel import Kernel
from .numgrid import DENSE_LIMIT, GridFn, dense_solve, neumann_solve
from .robust import Distortion, Preferences, SolverOptions, make_kernel, solve_on_kernel


@dataclass(frozen=True, eq=False)
class MomentSpec:
    """Payoff function ``g(x, x')`` returning a trailing axis of length ``d_g``."""

    g: Callable[[np.ndarray, np.ndarray], np.ndarray]
    d_g: int

    def on_nodes(self, kernel: Kernel) -> np.ndarray:
        x = np.broadcast_to(kernel.grid.points[:, None, :], kernel.points.shape)
        G = np.asarray(self.g(x, kernel.points), dtype=float).reshape(kernel.n, kernel.q, self.d_g)
        if not np.all(np.isfinite(G[kernel.logw > -np.inf])):
            raise ValueError("moment function not finite on the quadrature support")
        return G


def _resolvent(dist: Distortion, rhs: np.ndarray, method: str) -> np.ndarray:
    K = dist.prefs.beta * dist.P_v
    if method == "dense" or (method == "auto" and dist.kernel.n <= DENSE_LIMIT):
        return dense_solve(K, rhs)
    return neumann_solve(K, rhs, tol=1e-14)


@dataclass(frozen=True, eq=False)
class RhoDerivatives:
    d_alpha: np.ndarray
    d_beta: np.ndarray
    dv_alpha: np.ndarray
    dv_beta: np.ndarray
    rho: np.ndarray

    def as_gridfns(self, kernel: Kernel) -> tuple[list[GridFn], list[GridFn]]:
        make = lambda col: GridFn(kernel.grid, col, kernel.interp, kernel.extrap)  # noqa: E731
        return [make(c) for c in self.d_alpha.T], [make(c) for c in self.d_beta.T]


def rho_derivatives(dist: Distortion, g: MomentSpec, method: str = "auto") -> RhoDerivatives:
    """Derivatives of the moment map in alpha and beta at the solved point.

    With ``z = beta g - 1`` and ``E_v`` the worst-case expectation,

        d_alpha rho = E_v[z (u + dv_alpha(X'))] + (dv_alpha/beta) (1 - E_v[beta g])
        d_beta rho  = E_v[z dv_beta(X')] + E_v[g] + (dv_beta/beta - v/beta^2) (1 - E_v[beta g])

    where dv_alpha = (I - beta E_v)^{-1} beta E_v[u] and
    dv_beta = (I - beta E_v)^{-1} v / beta.  When the moment condition holds
    (E_v[beta g] = 1) the last terms vanish and E_v[g] = 1/beta.
    """
    k = dist.kernel
    beta = dist.prefs.beta
    v = dist.v.values
    U = k.U if k.U is not None else np.zeros((k.n, k.q))
    dv_a = _resolvent(dist, beta * dist.expect_v_pairs(U), method)
    dv_b = _resolvent(dist, v / beta, method)
    G = g.on_nodes(k)
    Z = beta * G - 1.0
    w = dist.weights_v[:, :, None]
    Ebg = np.sum(w * beta * G, axis=1)
    gap = 1.0 - Ebg
    da = np.sum(w * Z * (U + k.at_nodes(dv_a))[:, :, None], axis=1) + (dv_a / beta)[:, None] * gap
    db = (np.sum(w * Z * k.at_nodes(dv_b)[:, :, None], axis=1) + Ebg / beta
          + (dv_b / beta - v / beta**2)[:, None] * gap)
    return RhoDerivatives(da, db, dv_a, dv_b, Ebg - 1.0)


def stationary_weights(model, grid) -> np.ndarray:
    """Probability weights on grid nodes from the stationary density and trapezoid rule."""
    w = np.asarray(model.stationary_density(grid.points), dtype=float).reshape(-1) * grid.trapezoid_weights
    return w / w.sum()


@dataclass(frozen=True)
class IdentMatrix:
    V: np.ndarray
    eigenvalues: np.ndarray
    positive_definite: bool

    def to_dict(self) -> dict:
        return {"V": self.V.tolist(), "eigenvalues": self.eigenvalues.tolist(),
                "positive_definite": self.positive_definite}


def local_ident_matrix(model, derivs: RhoDerivatives, grid, rel_threshold: float = 1e-8) -> IdentMatrix:
    """V = E^{Q0}[J J'] with J the 2 x d_g stack of derivatives."""
    w = stationary_weights(model, grid)
    J = np.stack([derivs.d_alpha, derivs.d_beta], axis=1)
    V = np.einsum("n,nig,njg->ij", w, J, J)
    V = 0.5 * (V + V.T)
    eig = np.linalg.eigvalsh(V)
    pd = bool(eig[-1] > 0 and eig[0] > rel_threshold * eig[-1])
    return IdentMatrix(V, eig, pd)


@dataclass(frozen=True)
class UnderidentReport:
    """Comparison of the composite change of measure with the original one.

    ``discrepancy`` is the largest conditional L1 distance
    ``E^Q[|m_theta dQ_theta/dQ - m| | x]`` over grid nodes, i.e. twice the
    total variation between the two implied worst-case laws.  The pointwise
    sup over quadrature nodes and the sup of the log difference are kept for
    diagnosis; the former scales with ``m`` itself, which can be very large
    at far-tail nodes carrying negligible probability.
    """

    theta0: float
    theta_alt: float
    discrepancy: float
    sup_discrepancy: float
    log_discrepancy: float
    value_identity_error: float
    residual: float

    @property
    def passed(self) -> bool:
        return self.discrepancy < 1e-6

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["passed"] = self.passed
        return out


def underident_construct_check(model, prefs: Preferences, u, theta_alt: float,
                               opts: SolverOptions = SolverOptions(), kernel: Kernel | None = None
                               ) -> UnderidentReport:
    """Build Q_theta for ``theta_alt`` and compare worst-case changes of measure.

    ``dQ_theta/dQ = exp(v_d(x') + d u - v_d(x)/beta)`` with ``d = alpha0 - alpha(theta_alt)``
    and ``v_d`` the fixed point at alpha = d.  Under Q_theta the value is
    re-solved at alpha(theta_alt); the composite ``m_theta * dQ_theta/dQ``
    should reproduce the original ``m``.
    """
    kernel = kernel or make_kernel(model, u, opts)
    opts = replace(opts, tol=min(opts.tol, 1e-12))
    beta = prefs.beta
    a0 = prefs.alpha
    a1 = Preferences(beta, theta_alt).alpha
    delta = a0 - a1
    U = kernel.U
    v0, _, _, rep = solve_on_kernel(kernel, a0, beta, opts)
    if delta == 0:
        vd, k_theta, v1 = np.zeros(kernel.n), kernel, v0
        log_tilt = np.zeros_like(kernel.logw)
    else:
        vd, *_ = solve_on_kernel(kernel, delta, beta, opts)
        lw = kernel.logw + kernel.at_nodes(vd) + delta * U - vd[:, None] / beta
        lw = lw - logsumexp(lw, axis=1, keepdims=True)
        log_tilt = np.where(kernel.logw > -np.inf, lw - kernel.logw, 0.0)
        k_theta = replace(kernel, logw=lw)
        v1, _, _, rep = solve_on_kernel(k_theta, a1, beta, opts)
    log_m0 = kernel.at_nodes(v0) + a0 * U - v0[:, None] / beta
    log_m1 = k_theta.at_nodes(v1) + a1 * U - v1[:, None] / beta
    live = kernel.logw > -np.inf
    gap = np.where(live, np.abs(np.exp(log_m1 + log_tilt) - np.exp(log_m0)), 0.0)
    disc = float(np.max(kernel.expect_pairs(gap)))
    log_disc = float(np.max(np.abs(log_m1 + log_tilt - log_m0)[live]))
    ident_err = float(np.max(np.abs(v1 - (v0 - vd))))
    return UnderidentReport(prefs.theta, float(theta_alt), disc, float(np.max(gap)), log_disc, ident_err,
                            rep.residual)
