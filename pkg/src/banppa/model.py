"""Variational model for Poisson-process allocation.

Three variants share one code path:

``lppa``
    point-estimated non-negative weights ``theta``, unit rates, no priors on
    weights or rates, no volume constraint.
``banppa-nc``
    truncated stick-breaking weights with beta variational factors, rate point
    estimates ``eta`` under a gamma prior, no volume constraint.
``banppa``
    ``banppa-nc`` plus the per-component volume constraint handled through
    augmented-Lagrangian multipliers.

The intensity of sequence ``d`` is ``s_d sum_k theta_dk f_k(t)^2`` with
``f_k`` sparse GPs over shared pseudo inputs.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import digamma, gammaln, polygamma

from . import __version__
from .gp import KernelParams, PseudoInputs, SparseGPPosterior, jittered_cholesky, psi_matrix, psi_matrix_dlengthscale
from .gtable import GTable, default_gtable
from .kernels import event_terms
from .sequences import Dataset, TimeWindow

VARIANTS = ("lppa", "banppa-nc", "banppa")
FIT_FILE_VERSION = 1
ETA_FLOOR = 1e-8
VAR_FLOOR = 1e-12


class ContractError(ValueError):
    """Inputs inconsistent with the model state or variant."""


def normalize_variant(name: str) -> str:
    key = name.strip().lower().replace("_", "-")
    aliases = {"nc": "banppa-nc", "banppanc": "banppa-nc"}
    key = aliases.get(key, key)
    if key not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return key


@dataclass
class Hyperparams:
    alpha: float = 1.0
    a0: float = 1.0
    b0: float = 1.0
    g: float = 1.0


@dataclass
class AllocationPosterior:
    """Beta factors ``q(theta'_dk) = Beta(tau_dk0, tau_dk1)`` for ``k < K``."""

    tau: np.ndarray

    @property
    def K(self) -> int:
        return self.tau.shape[1] + 1

    @property
    def D(self) -> int:
        return self.tau.shape[0]


@dataclass
class AugLagMultipliers:
    w: np.ndarray
    v: np.ndarray
    A: float

    @classmethod
    def initial(cls, K: int, A: float, w0: float = 1.0, v0: float = 4.0) -> "AugLagMultipliers":
        return cls(np.full(K, w0), np.full(K, v0), float(A))

    @classmethod
    def zero(cls, K: int, A: float) -> "AugLagMultipliers":
        return cls(np.zeros(K), np.zeros(K), float(A))

    def penalty_floor(self) -> float:
        """Smallest possible value of ``sum_k w h + v h^2 / 2``."""
        pos = self.v > 0
        return float(-np.sum(self.w[pos] ** 2 / (2 * self.v[pos])))


@dataclass
class ModelState:
    variant: str
    window: TimeWindow
    pseudo: PseudoInputs
    gamma: float
    jitter: float
    lengthscales: np.ndarray
    mu: np.ndarray
    chol: np.ndarray
    hyper: Hyperparams
    A: float
    seq_ids: list
    counts: np.ndarray
    eta: np.ndarray
    tau: np.ndarray | None = None
    theta: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        self.lengthscales = np.asarray(self.lengthscales, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        self.chol = np.tril(np.asarray(self.chol, dtype=float))
        self.eta = np.asarray(self.eta, dtype=float)
        self.counts = np.asarray(self.counts, dtype=float)
        K, M = self.mu.shape
        if self.chol.shape != (K, M, M) or self.lengthscales.shape != (K,):
            raise ContractError("GP parameter shapes inconsistent")
        if M != self.pseudo.M:
            raise ContractError("mu does not match the pseudo inputs")
        D = len(self.seq_ids)
        if self.eta.shape != (D,) or self.counts.shape != (D,):
            raise ContractError("rate vector must have one entry per sequence")
        if self.variant == "lppa":
            if self.theta is None:
                raise ContractError("lppa state needs theta")
            self.theta = np.asarray(self.theta, dtype=float)
            if self.theta.shape != (D, K):
                raise ContractError("theta must be D x K")
            if np.any(self.theta < 0):
                raise ContractError("theta must be non-negative")
        else:
            if self.tau is None:
                raise ContractError("stick-breaking state needs tau")
            self.tau = np.asarray(self.tau, dtype=float)
            if self.tau.shape != (D, K - 1, 2):
                raise ContractError("tau must be D x (K-1) x 2")
            if np.any(self.tau <= 0):
                raise ContractError("tau must be positive")

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    @property
    def M(self) -> int:
        return self.mu.shape[1]

    @property
    def D(self) -> int:
        return len(self.seq_ids)

    @property
    def uses_sticks(self) -> bool:
        return self.variant != "lppa"

    def kernel_params(self, k: int) -> KernelParams:
        return KernelParams(self.gamma, float(self.lengthscales[k]), self.jitter)

    def posterior(self, k: int) -> SparseGPPosterior:
        return SparseGPPosterior(self.mu[k], self.chol[k])

    @property
    def alloc(self) -> AllocationPosterior:
        if self.tau is None:
            raise ContractError("lppa state has no stick posterior")
        return AllocationPosterior(self.tau)

    def rates(self) -> np.ndarray:
        return np.ones(self.D) if self.variant == "lppa" else self.eta

    def copy(self) -> "ModelState":
        return ModelState(
            variant=self.variant,
            window=self.window,
            pseudo=self.pseudo,
            gamma=self.gamma,
            jitter=self.jitter,
            lengthscales=self.lengthscales.copy(),
            mu=self.mu.copy(),
            chol=self.chol.copy(),
            hyper=Hyperparams(**vars(self.hyper)),
            A=self.A,
            seq_ids=list(self.seq_ids),
            counts=self.counts.copy(),
            eta=self.eta.copy(),
            tau=None if self.tau is None else self.tau.copy(),
            theta=None if self.theta is None else self.theta.copy(),
            meta=dict(self.meta),
        )

    # serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "banppa-fit",
            "version": FIT_FILE_VERSION,
            "tool_version": __version__,
            "variant": self.variant,
            "window": [self.window.start, self.window.end],
            "pseudo_inputs": self.pseudo.locations.tolist(),
            "gamma": self.gamma,
            "jitter": self.jitter,
            "lengthscales": self.lengthscales.tolist(),
            "mu": self.mu.tolist(),
            "chol": self.chol.tolist(),
            "hyper": vars(self.hyper),
            "A": self.A,
            "seq_ids": list(self.seq_ids),
            "counts": self.counts.tolist(),
            "eta": self.eta.tolist(),
            "tau": None if self.tau is None else self.tau.tolist(),
            "theta": None if self.theta is None else self.theta.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelState":
        if d.get("format") != "banppa-fit":
            raise ValueError("not a banppa fit file")
        if d.get("version") != FIT_FILE_VERSION:
            raise ValueError(f"unsupported fit-file version {d.get('version')}")
        return cls(
            variant=d["variant"],
            window=TimeWindow(*d["window"]),
            pseudo=PseudoInputs(np.array(d["pseudo_inputs"])),
            gamma=d["gamma"],
            jitter=d["jitter"],
            lengthscales=np.array(d["lengthscales"]),
            mu=np.array(d["mu"]),
            chol=np.array(d["chol"]),
            hyper=Hyperparams(**d["hyper"]),
            A=d["A"],
            seq_ids=list(d["seq_ids"]),
            counts=np.array(d["counts"]),
            eta=np.array(d["eta"]),
            tau=None if d["tau"] is None else np.array(d["tau"]),
            theta=None if d["theta"] is None else np.array(d["theta"]),
            meta=d.get("meta", {}),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()))
        return path

    @classmethod
    def load(cls, path) -> "ModelState":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# initialisation


def moment_match_gamma(counts) -> tuple[float, float]:
    """Gamma (shape, rate) with the mean and variance of ``counts``."""
    counts = np.asarray(counts, dtype=float)
    m = counts.mean() if counts.size else 1.0
    var = counts.var(ddof=1) if counts.size > 1 else 0.0
    if m <= 0:
        return 1.0, 1.0
    if var <= 0:
        return 1.0, 1.0 / m
    return m * m / var, m / var


def initial_state(
    ds: Dataset,
    variant: str,
    K: int,
    M: int,
    rng: np.random.Generator,
    alpha: float = 1.0,
    gamma: float | None = None,
    lengthscale: float | None = None,
    pseudo: PseudoInputs | None = None,
    mu_spread: float = 1.0,
) -> ModelState:
    """Randomised starting state.

    ``A = N/D``, ``g = sqrt(A/|T|)``. GP covariances start at the prior;
    means start at ``g (1 + mu_spread * eps)`` with ``eps`` standard normal
    per pseudo input, which breaks the symmetry between components
    (``mu_spread = 0`` gives the prior mean exactly).
    """
    variant = normalize_variant(variant)
    if ds.D == 0:
        raise ContractError("cannot initialise from an empty dataset")
    if K < 1 or (variant != "lppa" and K < 2):
        raise ContractError("K must be >= 2 for stick-breaking variants")
    T = ds.window.length
    A = max(ds.N / ds.D, 1e-8)
    g = float(np.sqrt(A / T))
    gamma = float(A / T) if gamma is None else float(gamma)
    pseudo = PseudoInputs.equispaced(ds.window, M) if pseudo is None else pseudo
    if lengthscale is None:
        spacing = T / max(M - 1, 1)
        lengthscale = 1.22 * spacing
    kp = KernelParams(gamma, lengthscale)
    L, eps = jittered_cholesky(kp, pseudo.locations)
    mu = np.full((K, M), g)
    chol = np.repeat(L[None], K, axis=0)
    a0, b0 = moment_match_gamma(ds.counts)
    hyper = Hyperparams(alpha=float(alpha), a0=a0, b0=b0, g=g)
    D = ds.D
    tau = theta = None
    if variant == "lppa":
        theta = rng.uniform(0.0, 1.0, size=(D, K))
        eta = np.ones(D)
    else:
        tau = np.empty((D, K - 1, 2))
        tau[..., 0] = 1.0
        tau[..., 1] = alpha + rng.uniform(0.0, 0.1, size=(D, K - 1))
        eta = np.maximum(ds.counts, 1.0) / A
    if mu_spread:
        mu = mu * (1 + mu_spread * rng.standard_normal(mu.shape))
    return ModelState(
        variant=variant,
        window=ds.window,
        pseudo=pseudo,
        gamma=gamma,
        jitter=eps,
        lengthscales=np.full(K, float(lengthscale)),
        mu=mu,
        chol=chol,
        hyper=hyper,
        A=A,
        seq_ids=ds.ids,
        counts=ds.counts,
        eta=eta,
        tau=tau,
        theta=theta,
    )


# ---------------------------------------------------------------------------
# stick-breaking expectations


def _stick_parts(tau):
    t0, t1 = tau[..., 0], tau[..., 1]
    s = t0 + t1
    ps = digamma(s)
    eln = digamma(t0) - ps
    eln1m = digamma(t1) - ps
    m = t0 / s
    return t0, t1, s, eln, eln1m, m


def _log_weights_and_means(tau):
    """``E ln theta`` and ``E theta`` for all sequences, shape (D, K)."""
    _, _, _, eln, eln1m, m = _stick_parts(tau)
    D = tau.shape[0]
    zeros = np.zeros((D, 1))
    logw = np.concatenate([zeros, np.cumsum(eln1m, axis=1)], axis=1)
    logw[:, :-1] += eln
    prefix = np.concatenate([np.ones((D, 1)), np.cumprod(1.0 - m, axis=1)], axis=1)
    etheta = prefix.copy()
    etheta[:, :-1] *= m
    return logw, etheta, prefix


def stick_means(alloc: AllocationPosterior, d: int | None = None) -> np.ndarray:
    """``E[theta_dk]`` under independent beta sticks; last stick is 1."""
    tau = alloc.tau if d is None else alloc.tau[d : d + 1]
    _, et, _ = _log_weights_and_means(tau)
    return et if d is None else et[0]


def expected_log_sticks(alloc: AllocationPosterior, d: int) -> tuple[np.ndarray, np.ndarray]:
    """``(E ln theta'_dk, E ln(1 - theta'_dk))`` for ``k < K``."""
    _, _, _, eln, eln1m, _ = _stick_parts(alloc.tau[d])
    return eln, eln1m


def expected_log_weights(state: ModelState) -> np.ndarray:
    if state.variant == "lppa":
        with np.errstate(divide="ignore"):
            return np.log(state.theta)
    return _log_weights_and_means(state.tau)[0]


def expected_weights(state: ModelState) -> np.ndarray:
    if state.variant == "lppa":
        return state.theta.copy()
    return _log_weights_and_means(state.tau)[1]


# ---------------------------------------------------------------------------
# GP block


class _GPTerms:
    """Per-component kernel factorisations and predictive moments.

    Quantities over the N query times are batched over components as
    ``(K, N, M)`` arrays; the ``M x M`` algebra stays per component.
    """

    def __init__(self, state: ModelState, times: np.ndarray, keep: bool = True):
        K, M = state.K, state.M
        z = state.pseudo.locations
        w = state.window
        self.V = np.empty(K)
        self.kl = np.empty(K)
        self.caches = []
        r2_nm = (times[:, None] - z[None, :]) ** 2
        r2_mm = (z[:, None] - z[None, :]) ** 2
        self.r2_nm, self.r2_mm = r2_nm, r2_mm
        g = state.hyper.g
        gam = state.gamma
        a = state.lengthscales
        Kinv = np.empty((K, M, M))
        eye = np.eye(M)
        for k in range(K):
            kp = state.kernel_params(k)
            Kraw = gam * np.exp(-0.5 * r2_mm / a[k] ** 2)
            Lk, eps = _chol_with_jitter(Kraw, kp)
            Ki = cho_solve((Lk, True), eye)
            Ki = 0.5 * (Ki + Ki.T)
            Kinv[k] = Ki
            mu = state.mu[k]
            L = state.chol[k]
            psi = psi_matrix(kp, state.pseudo, w)
            P = Ki @ psi @ Ki
            P = 0.5 * (P + P.T)
            Sig = L @ L.T
            S = Sig + np.outer(mu, mu)
            self.V[k] = gam * w.length - np.sum(Ki * psi) + np.sum(P * S)
            dvec = mu - g
            R = Sig + np.outer(dvec, dvec)
            logdet_K = 2.0 * np.sum(np.log(np.diag(Lk)))
            logdet_S = 2.0 * np.sum(np.log(np.abs(np.diag(L))))
            self.kl[k] = 0.5 * (logdet_S - logdet_K) + 0.5 * M - 0.5 * np.sum(Ki * R)
            if keep:
                self.caches.append(dict(kp=kp, Kinv=Ki, psi=psi, P=P, Sig=Sig, S=S, R=R, dvec=dvec))
        Knm = gam * np.exp(-0.5 * r2_nm[None, :, :] / (a * a)[:, None, None])
        Amat = np.matmul(Knm, Kinv)
        mean = np.matmul(Amat, state.mu[:, :, None])[..., 0]
        AL = np.matmul(Amat, state.chol)
        var = gam - np.einsum("knm,knm->kn", Amat, Knm) + np.einsum("knm,knm->kn", AL, AL)
        self.mean = np.ascontiguousarray(mean.T)
        self.var = np.ascontiguousarray(np.maximum(var, VAR_FLOOR).T)
        self.Kinv = Kinv
        if keep:
            self.Knm, self.Amat = Knm, Amat


def kernel_cholesky(gamma: float, lengthscale: float, jitter: float, r2: np.ndarray) -> np.ndarray:
    """Jittered Cholesky factor of the pseudo-input kernel matrix from squared distances."""
    kp = KernelParams(gamma, float(lengthscale), jitter)
    return _chol_with_jitter(gamma * np.exp(-0.5 * r2 / lengthscale**2), kp)[0]


def _chol_with_jitter(Kraw, kp: KernelParams):
    eps = kp.jitter
    eye = np.eye(Kraw.shape[0])
    while True:
        try:
            return np.linalg.cholesky(Kraw + eps * eye), eps
        except np.linalg.LinAlgError:
            eps *= 2
            if eps > 1e-2 * kp.gamma:
                from .gp import ConditioningError

                raise ConditioningError("kernel matrix not positive definite after jitter") from None


# ---------------------------------------------------------------------------
# objective


@dataclass
class Evaluation:
    value: float
    terms: dict
    V: np.ndarray
    grads: dict = field(default_factory=dict)


class Problem:
    """A dataset bound to the model; evaluates objective and gradients."""

    def __init__(self, ds: Dataset, tbl: GTable | None = None):
        self.ds = ds
        self.times, self.owner = ds.flat()
        self.counts = ds.counts
        self.tbl = default_gtable() if tbl is None else tbl

    def check(self, state: ModelState):
        if state.D != self.ds.D:
            raise ContractError(f"state has {state.D} sequences, data has {self.ds.D}")
        if state.window != self.ds.window:
            raise ContractError("state and data windows differ")

    def _per_seq(self, x: np.ndarray) -> np.ndarray:
        D = self.ds.D
        return np.stack([np.bincount(self.owner, weights=x[:, k], minlength=D) for k in range(x.shape[1])], axis=1)

    def gp_terms(self, state: ModelState, keep: bool = True) -> _GPTerms:
        return _GPTerms(state, self.times, keep=keep)

    def evaluate(
        self,
        state: ModelState,
        mult: AugLagMultipliers | None = None,
        grad: bool = True,
        lengthscale_grad: bool = True,
        gp: _GPTerms | None = None,
    ) -> Evaluation:
        self.check(state)
        D, K = state.D, state.K
        if gp is None:
            gp = self.gp_terms(state, keep=grad)
        lppa = state.variant == "lppa"
        if lppa:
            theta = state.theta
            with np.errstate(divide="ignore"):
                logw = np.log(theta)
            etheta = theta
            eta = np.ones(D)
        else:
            logw, etheta, prefix = _log_weights_and_means(state.tau)
            eta = state.eta
        lse, resp, gmean, gvar, elog = event_terms(gp.mean, gp.var, logw[self.owner], self.tbl)
        vol_d = etheta @ gp.V
        terms = {
            "event_mixture": float(np.sum(lse)),
            "volume": float(-np.sum(eta * vol_d)),
            "gp_kl": float(np.sum(gp.kl)),
        }
        hy = state.hyper
        if not lppa:
            terms["log_rate"] = float(np.sum(self.counts * np.log(eta)))
            terms["beta"] = _beta_term(state.tau, hy.alpha)
            terms["gamma_prior"] = float(
                np.sum(hy.a0 * np.log(hy.b0) - gammaln(hy.a0) + (hy.a0 - 1) * np.log(eta) - hy.b0 * eta)
            )
        elbo_val = float(sum(terms.values()))
        h = gp.V - state.A
        if mult is not None and state.variant == "banppa":
            pen = float(np.sum(mult.w * h + 0.5 * mult.v * h * h))
        else:
            pen = 0.0
        terms["penalty"] = -pen
        ev = Evaluation(elbo_val - pen, terms, gp.V.copy())
        ev.terms["elbo"] = elbo_val
        if not grad:
            return ev

        # dObjective/dV_k
        c = -(eta @ etheta)
        if mult is not None and state.variant == "banppa":
            c = c - (mult.w + mult.v * h)
        R = self._per_seq(resp)

        dmu = np.zeros_like(state.mu)
        dchol = np.zeros_like(state.chol)
        dlen = np.zeros(K)
        Amat, Knm = gp.Amat, gp.Knm
        gmT = np.ascontiguousarray(gmean.T)
        gvT = np.ascontiguousarray(gvar.T)
        u_all = np.einsum("knm,kn->km", Amat, gmT)
        W_all = np.matmul(Amat.transpose(0, 2, 1), gvT[:, :, None] * Amat)
        if lengthscale_grad:
            a_all = state.lengthscales
            Q_all = np.empty_like(W_all)
            beta_all = np.empty_like(state.mu)
        for k in range(K):
            ck = gp.caches[k]
            Kinv, P = ck["Kinv"], ck["P"]
            L = state.chol[k]
            mu = state.mu[k]
            u_grad = u_all[k]
            W = W_all[k]
            dmu[k] = u_grad + 2 * c[k] * (P @ mu) - Kinv @ ck["dvec"]
            dSig = W + c[k] * P - 0.5 * Kinv
            dL = np.tril(2 * dSig @ L)
            dL[np.diag_indices_from(dL)] += 1.0 / np.diag(L)
            dchol[k] = dL
            if lengthscale_grad:
                kp = ck["kp"]
                a = kp.lengthscale
                beta = Kinv @ mu
                Sig, S, Rm = ck["Sig"], ck["S"], ck["R"]
                Q_all[k] = Kinv @ Sig @ Kinv - Kinv
                beta_all[k] = beta
                SKi = Sig @ Kinv
                G_k = (
                    -np.outer(u_grad, beta)
                    + W
                    - W @ SKi
                    - SKi.T @ W
                    + c[k] * (P - P @ S @ Kinv - Kinv @ S @ P)
                    - 0.5 * Kinv
                    + 0.5 * Kinv @ Rm @ Kinv
                )
                G_psi = c[k] * (Kinv @ S @ Kinv - Kinv)
                dKmm = kp.gamma * np.exp(-0.5 * gp.r2_mm / a**2) * gp.r2_mm / a**3
                dPsi = psi_matrix_dlengthscale(kp, state.pseudo, state.window)
                dlen[k] = np.sum(G_k * dKmm) + np.sum(G_psi * dPsi)
        if lengthscale_grad:
            # contributions through K_nm: G_nm = gm beta^T + 2 gv (K_nm Q)
            T = Knm * gp.r2_nm[None, :, :]
            t1 = np.einsum("kn,knm,km->k", gmT, T, beta_all)
            t2 = 2 * np.einsum("kn,knm,knm->k", gvT, np.matmul(Knm, Q_all), T)
            dlen += (t1 + t2) / a_all**3
        ev.grads["mu"] = dmu
        ev.grads["chol"] = dchol
        if lengthscale_grad:
            ev.grads["lengthscales"] = dlen

        if lppa:
            with np.errstate(divide="ignore", invalid="ignore"):
                ev.grads["theta"] = np.where(theta > 0, R / theta, 0.0) - gp.V[None, :]
        else:
            ev.grads["tau"] = _tau_grad(state.tau, hy.alpha, R, eta, gp.V, prefix)
        ev.grads["R"] = R
        return ev


def _beta_term(tau, alpha) -> float:
    t0, t1, s, eln, eln1m, _ = _stick_parts(tau)
    val = (
        np.log(alpha)
        + (alpha - 1) * eln1m
        - gammaln(s)
        + gammaln(t0)
        + gammaln(t1)
        - (t1 - 1) * eln1m
        - (t0 - 1) * eln
    )
    return float(np.sum(val))


def _tau_grad(tau, alpha, R, eta, V, prefix):
    t0, t1, s, _, _, m = _stick_parts(tau)
    D, Km1 = t0.shape
    K = Km1 + 1
    tri0, tri1, tris = polygamma(1, t0), polygamma(1, t1), polygamma(1, s)
    # event term: d/dE[ln theta'_j] = R_j, d/dE[ln(1-theta'_j)] = sum_{k>j} R_k
    g_eln = R[:, :Km1]
    tail = np.cumsum(R[:, ::-1], axis=1)[:, ::-1]
    g_eln1m = tail[:, 1:]
    # volume term through the stick means
    mfull = np.concatenate([m, np.ones((D, 1))], axis=1)
    S = np.zeros((D, K))
    for j in range(K - 2, -1, -1):
        S[:, j] = V[j + 1] * mfull[:, j + 1] + (1 - mfull[:, j + 1]) * S[:, j + 1]
    g_m = -eta[:, None] * prefix[:, :Km1] * (V[None, :Km1] - S[:, :Km1])
    common = (t0 + t1 - alpha - 1) * tris
    d0 = g_eln * (tri0 - tris) - g_eln1m * tris + g_m * t1 / s**2 - (t0 - 1) * tri0 + common
    d1 = -g_eln * tris + g_eln1m * (tri1 - tris) - g_m * t0 / s**2 + (alpha - t1) * tri1 + common
    return np.stack([d0, d1], axis=-1)


# ---------------------------------------------------------------------------
# public operations


def compute_ldnk(state: ModelState, ds: Dataset, d: int, n: int, tbl: GTable | None = None) -> np.ndarray:
    """``exp(E ln theta_dk + E ln f_k(t_n)^2)`` for event ``n`` of sequence ``d``."""
    t = np.array([ds.sequences[d].events[n]])
    gp = _GPTerms(state, t, keep=False)
    logw = expected_log_weights(state)[d]
    _, _, _, _, elog = event_terms(gp.mean, gp.var, logw[None, :], tbl or default_gtable())
    return np.exp(logw + elog[0])


def elbo(state: ModelState, ds: Dataset) -> float:
    return Problem(ds).evaluate(state, grad=False).terms["elbo"]


def elbo_terms(state: ModelState, ds: Dataset) -> dict:
    """Named ELBO contributions; they sum to :func:`elbo`."""
    ev = Problem(ds).evaluate(state, grad=False)
    return {k: v for k, v in ev.terms.items() if k not in ("elbo", "penalty")}


def component_volumes(state: ModelState) -> np.ndarray:
    return _GPTerms(state, np.empty(0), keep=False).V


def constraint_residual(state: ModelState, k: int) -> float:
    if state.variant != "banppa":
        raise ContractError("volume constraint only exists for the banppa variant")
    return float(component_volumes(state)[k] - state.A)


def augmented_objective(state: ModelState, mult: AugLagMultipliers, ds: Dataset) -> float:
    return Problem(ds).evaluate(state, mult, grad=False).value


def grad_gp(state: ModelState, mult: AugLagMultipliers | None, ds: Dataset) -> dict:
    ev = Problem(ds).evaluate(state, mult, grad=True)
    return {k: ev.grads[k] for k in ("mu", "chol", "lengthscales")}


def grad_tau(state: ModelState, ds: Dataset) -> np.ndarray:
    if state.variant == "lppa":
        raise ContractError("lppa has no stick parameters")
    return Problem(ds).evaluate(state, None, grad=True, lengthscale_grad=False).grads["tau"]


def update_eta_closed_form(state: ModelState, ds: Dataset | None = None, V: np.ndarray | None = None) -> np.ndarray:
    """``eta_d = (N_d + a0 - 1) / (b0 + sum_k E[theta_dk] V_k)``."""
    if state.variant == "lppa":
        raise ContractError("lppa fixes the rates at one")
    if V is None:
        V = component_volumes(state)
    counts = state.counts if ds is None else ds.counts
    hy = state.hyper
    num = counts + hy.a0 - 1
    den = hy.b0 + expected_weights(state) @ V
    eta = num / den
    if np.any(eta <= ETA_FLOOR):
        warnings.warn("non-positive rate update clamped to floor", RuntimeWarning, stacklevel=2)
        eta = np.maximum(eta, ETA_FLOOR)
    return eta


def update_alpha_closed_form(state: ModelState) -> float:
    """``alpha = D(K-1) / sum (psi(tau0 + tau1) - psi(tau1))``."""
    if state.variant == "lppa":
        raise ContractError("lppa has no stick concentration")
    if state.K < 2:
        raise ContractError("need K >= 2")
    t0, t1 = state.tau[..., 0], state.tau[..., 1]
    den = float(np.sum(digamma(t0 + t1) - digamma(t1)))
    assert den > 0, "digamma is strictly increasing"
    return state.D * (state.K - 1) / den


def predict_moments(state: ModelState, times) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance of every latent function, shape (N, K)."""
    gp = _GPTerms(state, np.asarray(times, dtype=float).ravel(), keep=False)
    return gp.mean, gp.var


def expected_intensity(state: ModelState, times) -> np.ndarray:
    """``eta_d sum_k E[theta_dk] (mean_k(t)^2 + var_k(t))``, shape (D, len(times))."""
    mean, var = predict_moments(state, times)
    second = mean * mean + var
    return state.rates()[:, None] * (expected_weights(state) @ second.T)


def intensity_bound(state: ModelState, times) -> float:
    """``(a0/b0) max_k max_t (E[f_k]^2 + Var f_k)`` over the given times."""
    mean, var = predict_moments(state, times)
    return float(state.hyper.a0 / state.hyper.b0 * np.max(mean * mean + var))
