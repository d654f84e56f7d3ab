"""Augmented-Lagrangian outer loop over a projected quasi-Newton inner solver.

Each inner solve alternates bound-constrained L-BFGS bursts on the
continuous parameters (GP means, Cholesky factors, lengthscales and the
allocation parameters) with the closed-form rate and concentration updates.
The outer loop updates the multipliers ``w <- w + v h`` and ``v <- 4 v``
and warm-starts every round from the previous solution.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from .gp import ConditioningError
from .model import (
    AugLagMultipliers,
    ModelState,
    Problem,
    initial_state,
    kernel_cholesky,
    normalize_variant,
    update_alpha_closed_form,
    update_eta_closed_form,
)
from .sequences import Dataset

log = logging.getLogger(__name__)


@dataclass
class FitConfig:
    variant: str = "banppa"
    K: int = 14
    M: int = 18
    max_outer: int = 15
    inner_tol: float = 1e-3
    outer_tol: float = 1e-3
    learn_alpha: bool = True
    alpha: float = 1.0
    seed: int = 0
    floor: float = 1e-6
    gamma: float | None = None
    lengthscale: float | None = None
    learn_lengthscale: bool = True
    min_lengthscale_factor: float = 0.25
    qn_memory: int = 10
    qn_maxiter: int = 250
    mu_spread: float = 1.0
    restarts: int = 5
    max_sweeps: int = 30
    grad_tol: float = 1e-6
    w_clip: float = 1e6
    w0: float = 1.0
    v0: float = 4.0
    v_growth: float = 4.0

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        if self.inner_tol <= 0 or self.outer_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class InnerInfo:
    accepted_steps: int = 0
    sweeps: int = 0
    trace: list = field(default_factory=list)
    degraded: bool = False


@dataclass
class FitResult:
    state: ModelState
    objective_trace: list
    residual_trace: list
    multiplier_trace: list
    wall_time: float
    outer_iterations: int
    termination: str
    degraded: bool = False
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "objective_trace": self.objective_trace,
            "residual_trace": self.residual_trace,
            "multiplier_trace": self.multiplier_trace,
            "wall_time": self.wall_time,
            "outer_iterations": self.outer_iterations,
            "termination": self.termination,
            "degraded": self.degraded,
            "config": self.config,
        }

    def numeric_traces(self) -> dict:
        """Traces without wall-clock quantities (deterministic)."""
        d = self.to_dict()
        d.pop("wall_time")
        return d

    def write_traces(self, path, residuals: bool = True) -> Path:
        """Objective (and residual) traces as CSV, one row per inner sweep."""
        path = Path(path)
        cols = ["outer", "sweep", "objective", "elbo"] + (["max_rel_residual"] if residuals else [])
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(cols)
            for row in self.objective_trace:
                wr.writerow([row[c] if c in ("outer", "sweep") else repr(row[c]) for c in cols])
        return path


def project_positive(values, floor: float, mask=None) -> np.ndarray:
    """Elementwise ``max(value, floor)`` on the masked (constrained) coordinates."""
    if not floor > 0:
        raise ValueError("floor must be positive")
    values = np.asarray(values, dtype=float)
    if mask is None:
        return np.maximum(values, floor)
    out = values.copy()
    out[mask] = np.maximum(out[mask], floor)
    return out


class _Packer:
    """Maps the continuous parameters of a state to one flat vector.

    GP blocks are optimised in prior-whitened coordinates
    ``mu = g + L_K nu`` and ``chol = L_K L_nu`` where ``L_K`` is the
    Cholesky factor of the (jittered) pseudo-input kernel matrix. The
    objective is unchanged; only the optimiser's geometry is.
    """

    def __init__(self, state: ModelState, cfg: FitConfig):
        self.K, self.M = state.K, state.M
        self.lppa = state.variant == "lppa"
        self.learn_len = cfg.learn_lengthscale
        self.tril = np.tril_indices(self.M)
        self.r2 = (state.pseudo.locations[:, None] - state.pseudo.locations[None, :]) ** 2
        nt = len(self.tril[0])
        diag = self.tril[0] == self.tril[1]
        lo = []
        self.sizes = [("nu", self.K * self.M), ("lnu", self.K * nt)]
        lo.append(np.full(self.K * self.M, -np.inf))
        lo.append(np.where(np.tile(diag, self.K), cfg.floor, -np.inf))
        if self.learn_len:
            self.sizes.append(("lengthscales", self.K))
            spacing = state.window.length / max(self.M - 1, 1)
            lo.append(np.full(self.K, cfg.min_lengthscale_factor * spacing))
        alloc = "theta" if self.lppa else "log_tau"
        n_alloc = state.theta.size if self.lppa else state.tau.size
        self.sizes.append((alloc, n_alloc))
        # stick parameters live on a log scale (their magnitudes span decades)
        lo.append(np.full(n_alloc, cfg.floor if self.lppa else np.log(cfg.floor)))
        self.lower = np.concatenate(lo)
        self.bounds = [(None if not np.isfinite(l) else l, None) for l in self.lower]
        self.constrained = np.isfinite(self.lower)
        self._last = None

    def _factors(self, st: ModelState, lengthscales) -> np.ndarray:
        return np.stack([kernel_cholesky(st.gamma, a, st.jitter, self.r2) for a in lengthscales])

    def pack(self, st: ModelState) -> np.ndarray:
        Lk = self._factors(st, st.lengthscales)
        nu = np.stack([solve_triangular(Lk[k], st.mu[k] - st.hyper.g, lower=True) for k in range(self.K)])
        lnu = np.stack([solve_triangular(Lk[k], st.chol[k], lower=True) for k in range(self.K)])
        parts = [nu.ravel(), lnu[:, self.tril[0], self.tril[1]].ravel()]
        if self.learn_len:
            parts.append(st.lengthscales)
        parts.append(st.theta.ravel() if self.lppa else np.log(st.tau).ravel())
        return np.concatenate(parts)

    def unpack(self, x: np.ndarray, st: ModelState) -> ModelState:
        out = st.copy()
        i = 0
        blocks = {}
        for name, n in self.sizes:
            blocks[name] = x[i : i + n]
            i += n
        if self.learn_len:
            out.lengthscales = blocks["lengthscales"].copy()
        nu = blocks["nu"].reshape(self.K, self.M)
        lnu = np.zeros((self.K, self.M, self.M))
        lnu[:, self.tril[0], self.tril[1]] = blocks["lnu"].reshape(self.K, -1)
        Lk = self._factors(out, out.lengthscales)
        out.mu = st.hyper.g + np.matmul(Lk, nu[:, :, None])[..., 0]
        out.chol = np.tril(np.matmul(Lk, lnu))
        if self.lppa:
            out.theta = blocks["theta"].reshape(st.theta.shape).copy()
        else:
            out.tau = np.exp(blocks["log_tau"]).reshape(st.tau.shape)
        self._last = (out, Lk, nu, lnu)
        return out

    def grad(self, ev, st: ModelState) -> np.ndarray:
        """Gradient in packed coordinates; ``st`` must come from :meth:`unpack`."""
        if self._last is None or self._last[0] is not st:
            self.unpack(self.pack(st), st)
        _, Lk, nu, lnu = self._last
        g = ev.grads
        LkT = Lk.transpose(0, 2, 1)
        dnu = np.matmul(LkT, g["mu"][:, :, None])[..., 0]
        dlnu = np.tril(np.matmul(LkT, g["chol"]))
        parts = [dnu.ravel(), dlnu[:, self.tril[0], self.tril[1]].ravel()]
        if self.learn_len:
            dlen = g["lengthscales"].copy()
            for k in range(self.K):
                a = st.lengthscales[k]
                dK = st.gamma * np.exp(-0.5 * self.r2 / a**2) * self.r2 / a**3
                X = solve_triangular(Lk[k], solve_triangular(Lk[k], dK, lower=True).T, lower=True).T
                Phi = np.tril(X)
                Phi[np.diag_indices_from(Phi)] *= 0.5
                dL = Lk[k] @ Phi
                dlen[k] += g["mu"][k] @ (dL @ nu[k]) + np.sum(g["chol"][k] * np.tril(dL @ lnu[k]))
            parts.append(dlen)
        parts.append(g["theta"].ravel() if self.lppa else (g["tau"] * st.tau).ravel())
        return np.concatenate(parts)

    def project(self, x: np.ndarray) -> np.ndarray:
        """Clamp every bounded coordinate to its lower bound."""
        return np.where(self.constrained, np.maximum(x, self.lower), x)

    def projected_grad_norm(self, x, gvec) -> float:
        # ascent direction blocked at an active lower bound
        pg = gvec.copy()
        at_lo = self.constrained & (x <= self.lower) & (pg < 0)
        pg[at_lo] = 0.0
        return float(np.max(np.abs(pg))) if pg.size else 0.0


def _closed_form_updates(state: ModelState, problem: Problem, cfg: FitConfig, V=None) -> ModelState:
    if state.variant == "lppa":
        return state
    st = state.copy()
    st.eta = update_eta_closed_form(st, problem.ds, V=V)
    if cfg.learn_alpha:
        st.hyper.alpha = update_alpha_closed_form(st)
    return st


def inner_solve(
    state: ModelState,
    mult: AugLagMultipliers | None,
    problem: Problem,
    cfg: FitConfig,
) -> tuple[ModelState, InnerInfo]:
    """Maximise the (augmented) objective at fixed multipliers."""
    packer = _Packer(state, cfg)
    scale = 1.0 / max(problem.ds.N, 1)
    info = InnerInfo()
    x = packer.pack(state)
    ev = problem.evaluate(state, mult, grad=True, lengthscale_grad=cfg.learn_lengthscale)
    if packer.projected_grad_norm(x, packer.grad(ev, state)) * scale <= cfg.grad_tol:
        # eta/alpha are exact coordinate maximisers; check them too
        st2 = _closed_form_updates(state, problem, cfg, V=ev.V)
        val2 = problem.evaluate(st2, mult, grad=False).value
        if abs(val2 - ev.value) <= 1e-12 * max(1.0, abs(ev.value)):
            info.trace.append(ev.value)
            return state, info

    best = state
    best_val = ev.value
    info.trace.append(best_val)

    def fun(xv):
        st = packer.unpack(xv, best)
        try:
            e = problem.evaluate(st, mult, grad=True, lengthscale_grad=cfg.learn_lengthscale)
        except (ConditioningError, FloatingPointError, np.linalg.LinAlgError):
            return np.inf, np.zeros_like(xv)
        if not np.isfinite(e.value):
            return np.inf, np.zeros_like(xv)
        return -e.value * scale, -packer.grad(e, st) * scale

    for sweep in range(cfg.max_sweeps):
        x0 = packer.pack(best)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            res = minimize(
                fun,
                x0,
                jac=True,
                method="L-BFGS-B",
                bounds=packer.bounds,
                options={"maxcor": cfg.qn_memory, "maxiter": cfg.qn_maxiter, "gtol": cfg.grad_tol,
                         "ftol": 1e-12},
            )
        if res.status == 2 or (not res.success and res.status != 1):
            info.degraded = True
        cand_val = -res.fun / scale if np.isfinite(res.fun) else -np.inf
        prev_val = best_val
        if cand_val >= best_val:
            best = packer.unpack(packer.project(res.x), best)
            best_val = cand_val
            info.accepted_steps += int(res.nit)
        upd = _closed_form_updates(best, problem, cfg)
        upd_val = problem.evaluate(upd, mult, grad=False).value
        if upd_val >= best_val:
            best, best_val = upd, upd_val
        info.sweeps += 1
        info.trace.append(best_val)
        if abs(best_val - prev_val) <= cfg.inner_tol * max(abs(prev_val), 1e-12):
            break
    return best, info


def outer_loop(ds: Dataset, cfg: FitConfig, state: ModelState | None = None) -> FitResult:
    """Fit a model to ``ds``; see :class:`FitConfig` for the knobs.

    Without an explicit ``state`` the fit is repeated from ``cfg.restarts``
    random starts and the run with the highest final training objective is
    returned. Start 0 draws from ``default_rng(seed)``, start ``i`` from
    ``default_rng([seed, i])``.
    """
    if ds.D == 0 or ds.N == 0:
        raise ValueError("cannot fit an empty dataset")
    t_start = time.perf_counter()
    problem = Problem(ds)
    if state is not None:
        return _fit_from(state, cfg, problem, t_start)
    best = None
    values = []
    for i in range(cfg.restarts):
        rng = np.random.default_rng(cfg.seed if i == 0 else [cfg.seed, i])
        start = initial_state(ds, cfg.variant, cfg.K, cfg.M, rng, alpha=cfg.alpha, gamma=cfg.gamma,
                              lengthscale=cfg.lengthscale, mu_spread=cfg.mu_spread)
        res = _fit_from(start, cfg, problem, time.perf_counter())
        val = res.state.meta["train_objective"]
        values.append(val)
        log.info("start %d: final objective %.6g", i, val)
        if best is None or val > best.state.meta["train_objective"]:
            best = res
            best.state.meta["start"] = i
    best.state.meta["start_objectives"] = values
    best.wall_time = time.perf_counter() - t_start
    best.state.meta["wall_time"] = best.wall_time
    return best


def _fit_from(state: ModelState, cfg: FitConfig, problem: Problem, t_start: float) -> FitResult:
    obj_trace: list = []
    res_trace: list = []
    mult_trace: list = []
    degraded = False

    def record(outer, info, st, mult):
        V = problem.evaluate(st, None, grad=False).V
        rel = float(np.max(np.abs(V - st.A)) / st.A)
        ev = problem.evaluate(st, mult, grad=False)
        for i, val in enumerate(info.trace):
            obj_trace.append({"outer": outer, "sweep": i, "objective": float(val),
                              "elbo": float(ev.terms["elbo"]) if i == len(info.trace) - 1 else float("nan"),
                              "max_rel_residual": rel if i == len(info.trace) - 1 else float("nan")})
        return ev, V

    if cfg.variant != "banppa":
        mult = AugLagMultipliers.zero(cfg.K, state.A) if cfg.variant == "banppa-nc" else None
        state, info = inner_solve(state, mult, problem, cfg)
        ev, V = record(0, info, state, mult)
        res_trace.append((V - state.A).tolist())
        termination = "converged" if info.sweeps < cfg.max_sweeps else "max-sweeps"
        state.meta.update(_meta(cfg, ev, info.degraded))
        state.meta["wall_time"] = time.perf_counter() - t_start
        return FitResult(state, obj_trace, res_trace, mult_trace, time.perf_counter() - t_start, 1,
                         termination, info.degraded, cfg.to_dict())

    mult = AugLagMultipliers.initial(cfg.K, state.A, cfg.w0, cfg.v0)
    prev = None
    termination = "max-iterations"
    outer = 0
    ev = None
    for outer in range(1, cfg.max_outer + 1):
        mult_trace.append({"w": mult.w.tolist(), "v": mult.v.tolist()})
        state, info = inner_solve(state, mult, problem, cfg)
        degraded |= info.degraded
        ev, V = record(outer, info, state, mult)
        h = V - state.A
        res_trace.append(h.tolist())
        cur = ev.value
        log.info("outer %d: objective %.6g, max |h|/A %.3g", outer, cur, np.max(np.abs(h)) / state.A)
        if prev is not None and abs(cur - prev) < cfg.outer_tol * abs(prev):
            termination = "converged"
            break
        prev = cur
        mult = AugLagMultipliers(
            np.clip(mult.w + mult.v * h, -cfg.w_clip, cfg.w_clip),
            mult.v * cfg.v_growth,
            mult.A,
        )
    state.meta.update(_meta(cfg, ev, degraded))
    state.meta["wall_time"] = time.perf_counter() - t_start
    state.meta["multipliers"] = {"w": mult.w.tolist(), "v": mult.v.tolist()}
    return FitResult(state, obj_trace, res_trace, mult_trace, time.perf_counter() - t_start, outer,
                     termination, degraded, cfg.to_dict())


def _meta(cfg: FitConfig, ev, degraded: bool) -> dict:
    return {
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "train_objective": None if ev is None else float(ev.value),
        "train_elbo": None if ev is None else float(ev.terms["elbo"]),
        "degraded": bool(degraded),
    }
