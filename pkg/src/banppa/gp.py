"""Squared-exponential kernel machinery and sparse-GP expectations.

All latent functions share one set of pseudo inputs. A latent function
``f_k`` has a Gaussian variational posterior ``N(mu, L L^T)`` over its
values at the pseudo inputs; predictions use the conditional
``f(t) | f_M`` of a zero-mean GP with the same kernel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import erf

from .sequences import TimeWindow

SQRT_PI = float(np.sqrt(np.pi))
VAR_FLOOR = 1e-12
MAX_JITTER_FACTOR = 1e-2


class ConditioningError(np.linalg.LinAlgError):
    """Cholesky failed even after jitter escalation."""


@dataclass(frozen=True)
class KernelParams:
    gamma: float
    lengthscale: float
    jitter: float | None = None

    def __post_init__(self):
        if not self.gamma > 0 or not self.lengthscale > 0:
            raise ValueError("kernel parameters must be strictly positive")
        if self.jitter is None:
            object.__setattr__(self, "jitter", 1e-6 * self.gamma)
        elif not self.jitter > 0:
            raise ValueError("jitter must be strictly positive")


@dataclass(frozen=True)
class PseudoInputs:
    locations: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float).ravel()
        if loc.size < 1:
            raise ValueError("need at least one pseudo input")
        if np.any(np.diff(loc) <= 0):
            raise ValueError("pseudo inputs must be strictly increasing")
        loc.setflags(write=False)
        object.__setattr__(self, "locations", loc)

    @property
    def M(self) -> int:
        return self.locations.size

    @classmethod
    def equispaced(cls, window: TimeWindow, M: int) -> "PseudoInputs":
        if M == 1:
            return cls(np.array([0.5 * (window.start + window.end)]))
        return cls(np.linspace(window.start, window.end, M))


@dataclass(frozen=True)
class SparseGPPosterior:
    mu: np.ndarray
    chol: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).ravel()
        L = np.tril(np.asarray(self.chol, dtype=float))
        if L.shape != (mu.size, mu.size):
            raise ValueError("chol must be M x M with M = len(mu)")
        if np.any(np.diag(L) <= 0):
            raise ValueError("chol must have a positive diagonal")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "chol", L)

    @property
    def cov(self) -> np.ndarray:
        return self.chol @ self.chol.T


def kernel_eval(p: KernelParams, t, u):
    r = np.asarray(t, dtype=float) - np.asarray(u, dtype=float)
    return p.gamma * np.exp(-0.5 * r * r / p.lengthscale**2)


def kernel_matrix(p: KernelParams, X, Y, add_jitter: bool = False) -> np.ndarray:
    X = np.asarray(X, dtype=float).ravel()
    Y = np.asarray(Y, dtype=float).ravel()
    K = kernel_eval(p, X[:, None], Y[None, :])
    if add_jitter:
        if X.shape != Y.shape or not np.array_equal(X, Y):
            raise ValueError("jitter only applies to a square kernel matrix on X = Y")
        K = K + p.jitter * np.eye(X.size)
    return K


def kernel_matrix_dlengthscale(p: KernelParams, X, Y) -> np.ndarray:
    X = np.asarray(X, dtype=float).ravel()
    Y = np.asarray(Y, dtype=float).ravel()
    r2 = (X[:, None] - Y[None, :]) ** 2
    a = p.lengthscale
    return p.gamma * np.exp(-0.5 * r2 / a**2) * r2 / a**3


def jittered_cholesky(p: KernelParams, X) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``K + eps I``.

    ``eps`` starts at ``p.jitter`` and doubles on failure up to
    ``1e-2 * gamma``.
    """
    Kraw = kernel_matrix(p, X, X)
    eps = p.jitter
    eye = np.eye(Kraw.shape[0])
    while True:
        try:
            return np.linalg.cholesky(Kraw + eps * eye), eps
        except np.linalg.LinAlgError:
            eps *= 2
            if eps > MAX_JITTER_FACTOR * p.gamma:
                raise ConditioningError("kernel matrix not positive definite after jitter") from None


def _psi_parts(p: KernelParams, pi: PseudoInputs, w: TimeWindow):
    z = pi.locations
    a = p.lengthscale
    zi, zj = z[:, None], z[None, :]
    mid = 0.5 * (zi + zj)
    d2 = (zi - zj) ** 2
    E = np.exp(-d2 / (4 * a * a))
    phi = w.end - mid
    plo = w.start - mid
    W = erf(phi / a) - erf(plo / a)
    return a, d2, E, phi, plo, W


def psi_matrix(p: KernelParams, pi: PseudoInputs, w: TimeWindow) -> np.ndarray:
    """``Psi_ij = int_T k(t_i, x) k(x, t_j) dx`` in closed form."""
    a, _, E, _, _, W = _psi_parts(p, pi, w)
    psi = p.gamma**2 * E * (0.5 * SQRT_PI * a) * W
    return 0.5 * (psi + psi.T)


def psi_matrix_dlengthscale(p: KernelParams, pi: PseudoInputs, w: TimeWindow) -> np.ndarray:
    a, d2, E, phi, plo, W = _psi_parts(p, pi, w)
    dE = E * d2 / (2 * a**3)
    # d/da [a W(a)]
    daW = W - (2 / (SQRT_PI * a)) * (phi * np.exp(-(phi / a) ** 2) - plo * np.exp(-(plo / a) ** 2))
    out = p.gamma**2 * 0.5 * SQRT_PI * (dE * a * W + E * daW)
    return 0.5 * (out + out.T)


class _Conditional:
    """Cached factorisation of the pseudo-input kernel matrix."""

    def __init__(self, p: KernelParams, pi: PseudoInputs):
        self.p = p
        self.pi = pi
        self.Lk, self.eps = jittered_cholesky(p, pi.locations)
        M = pi.M
        self.Kinv = cho_solve((self.Lk, True), np.eye(M))
        self.Kinv = 0.5 * (self.Kinv + self.Kinv.T)
        self.logdet = 2.0 * np.sum(np.log(np.diag(self.Lk)))

    def project(self, query) -> tuple[np.ndarray, np.ndarray]:
        Knm = kernel_matrix(self.p, query, self.pi.locations)
        return Knm, Knm @ self.Kinv


def predictive_moments(post: SparseGPPosterior, p: KernelParams, pi: PseudoInputs, query):
    """Mean and marginal variance of ``q(f(t))`` at the query times."""
    cond = _Conditional(p, pi)
    Knm, A = cond.project(query)
    mean = A @ post.mu
    var = p.gamma - np.sum(A * Knm, axis=1) + np.sum((A @ post.chol) ** 2, axis=1)
    return mean, np.maximum(var, VAR_FLOOR)


def expected_integral_square(
    post: SparseGPPosterior, p: KernelParams, pi: PseudoInputs, w: TimeWindow
) -> float:
    """``int_T E_q[f(s)^2] ds``.

    ``gamma |T| - tr(K^-1 Psi) + tr(K^-1 Psi K^-1 (Sigma + mu mu^T))``.
    """
    cond = _Conditional(p, pi)
    psi = psi_matrix(p, pi, w)
    P = cond.Kinv @ psi @ cond.Kinv
    S = post.cov + np.outer(post.mu, post.mu)
    val = p.gamma * w.length - np.sum(cond.Kinv * psi) + np.sum(P * S)
    return float(max(val, 0.0))


def gp_kl_term(post: SparseGPPosterior, p: KernelParams, pi: PseudoInputs, g: float) -> float:
    """``E_q ln p(f_M)/q(f_M)`` with prior ``N(g 1, K_MM)``; equals ``-KL(q||p)``."""
    cond = _Conditional(p, pi)
    d = post.mu - g
    logdet_q = 2.0 * np.sum(np.log(np.diag(post.chol)))
    R = post.cov + np.outer(d, d)
    return float(0.5 * (logdet_q - cond.logdet) + 0.5 * pi.M - 0.5 * np.sum(cond.Kinv * R))


def prior_posterior(p: KernelParams, pi: PseudoInputs, g: float) -> SparseGPPosterior:
    """Posterior equal to the prior ``N(g 1, K_MM + eps I)``."""
    L, _ = jittered_cholesky(p, pi.locations)
    return SparseGPPosterior(np.full(pi.M, float(g)), L)


__all__ = [
    "ConditioningError",
    "KernelParams",
    "PseudoInputs",
    "SparseGPPosterior",
    "expected_integral_square",
    "gp_kl_term",
    "jittered_cholesky",
    "kernel_eval",
    "kernel_matrix",
    "kernel_matrix_dlengthscale",
    "predictive_moments",
    "prior_posterior",
    "psi_matrix",
    "psi_matrix_dlengthscale",
]
