"""Held-out likelihood estimators, allocation summaries and evaluation reports."""
from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import __version__
from .gtable import expected_log_square
from .model import (
    ContractError,
    ModelState,
    component_volumes,
    expected_intensity,
    expected_weights,
    predict_moments,
)
from .sequences import Dataset

ACTIVE_THRESHOLD = 0.01
REPORT_FORMAT = "banppa-report"
REPORT_VERSION = 1


def _check_pair(fit: ModelState, data: Dataset):
    if fit.window != data.window:
        raise ContractError("fit and data windows differ")
    if fit.D != data.D:
        raise ContractError(f"fit has {fit.D} sequences, data has {data.D}")
    if fit.seq_ids and list(fit.seq_ids) != data.ids:
        raise ContractError("fit and data sequence ids differ")


def _event_log_terms(fit: ModelState, data: Dataset):
    times, owner = data.flat()
    if times.size == 0:
        return np.empty((0, fit.K)), owner
    mean, var = predict_moments(fit, times)
    return expected_log_square(mean, var), owner


def _point_weights(fit: ModelState) -> tuple[np.ndarray, np.ndarray]:
    theta = fit.theta if fit.variant == "lppa" else expected_weights(fit)
    return theta, fit.rates()


def _bound(elog, owner, log_s, log_theta, s, theta, V) -> float:
    event = 0.0
    if elog.shape[0]:
        event = float(np.sum(log_s[owner] + logsumexp(log_theta[owner] + elog, axis=1)))
    return event - float(np.sum(s * (theta @ V)))


def test_likelihood_point(fit: ModelState, test: Dataset) -> float:
    """Lower bound on the held-out log-likelihood at point weights and rates.

    LPPA uses its point weights and unit rates; stick variants use the
    posterior-mean weights and ``eta`` as the rate.
    """
    _check_pair(fit, test)
    elog, owner = _event_log_terms(fit, test)
    theta, s = _point_weights(fit)
    V = component_volumes(fit)
    with np.errstate(divide="ignore"):
        return _bound(elog, owner, np.log(s), np.log(theta), s, theta, V)


def _sample_sticks(tau: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Weights from Beta stick fractions, last stick fixed to one."""
    frac = rng.beta(tau[..., 0], tau[..., 1])
    D, Km1 = frac.shape
    out = np.empty((D, Km1 + 1))
    rest = np.ones(D)
    for k in range(Km1):
        out[:, k] = rest * frac[:, k]
        rest = rest * (1 - frac[:, k])
    out[:, -1] = rest
    return out


def test_likelihood_sampled(
    fit: ModelState,
    test: Dataset,
    L: int = 100,
    rng: np.random.Generator | None = None,
    rate_law: str = "conditional",
) -> tuple[float, float]:
    """Monte-Carlo average of the held-out bound over draws of ``(s, theta)``.

    ``theta_d`` is drawn from its variational stick posterior. ``rate_law``
    picks the law of ``s_d``: ``"conditional"`` uses
    ``Gamma(N_d + a0, b0 + sum_k E[theta_dk] V_k)`` (mode ``eta_d``),
    ``"prior"`` uses ``Gamma(a0, b0)``; ``"point"`` fixes ``s_d = eta_d``.

    Returns the mean and its Monte-Carlo standard error.
    """
    if fit.variant == "lppa":
        raise ContractError("sampled estimator needs a stick-based variant")
    if L < 1:
        raise ContractError("need at least one sample")
    if rate_law not in ("conditional", "prior", "point"):
        raise ValueError(f"unknown rate law {rate_law!r}")
    _check_pair(fit, test)
    rng = np.random.default_rng() if rng is None else rng
    elog, owner = _event_log_terms(fit, test)
    V = component_volumes(fit)
    hy = fit.hyper
    if rate_law == "conditional":
        shape = fit.counts + hy.a0
        rate = hy.b0 + expected_weights(fit) @ V
    vals = np.empty(L)
    for i in range(L):
        theta = _sample_sticks(fit.tau, rng)
        if rate_law == "conditional":
            s = rng.gamma(shape, 1.0 / rate)
        elif rate_law == "prior":
            s = rng.gamma(hy.a0, 1.0 / hy.b0, size=fit.D)
        else:
            s = fit.eta
        with np.errstate(divide="ignore"):
            vals[i] = _bound(elog, owner, np.log(s), np.log(theta), s, theta, V)
    se = float(vals.std(ddof=1) / np.sqrt(L)) if L > 1 else float("nan")
    return float(vals.mean()), se


def normalized_allocation(fit: ModelState) -> np.ndarray:
    """Row-stochastic ``D x K`` matrix ``E[theta_dk] V_k / sum_m E[theta_dm] V_m``."""
    theta, _ = _point_weights(fit)
    mass = theta * component_volumes(fit)[None, :]
    tot = mass.sum(axis=1, keepdims=True)
    zero = tot[:, 0] <= 0
    if np.any(zero):
        warnings.warn(f"{int(zero.sum())} sequence(s) with zero allocation mass set uniform",
                      RuntimeWarning, stacklevel=2)
        mass[zero] = 1.0
        tot[zero] = fit.K
    return mass / tot


def ner(fit: ModelState) -> np.ndarray:
    """Normalised expected responsibility: column means of the normalised allocation."""
    return normalized_allocation(fit).mean(axis=0)


def uner(fit: ModelState) -> np.ndarray:
    """Column means of the posterior-mean weights (not normalised for LPPA)."""
    theta, _ = _point_weights(fit)
    return theta.mean(axis=0)


def active_components(ner_vec, threshold: float = ACTIVE_THRESHOLD) -> np.ndarray:
    return np.flatnonzero(np.asarray(ner_vec) >= threshold)


def top_mass(ner_vec, n: int = 4) -> float:
    return float(np.sort(np.asarray(ner_vec))[::-1][:n].sum())


def intensity_curves(fit: ModelState, points: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Grid samples of the posterior-mean intensity of every sequence."""
    if points < 2:
        raise ValueError("need at least two grid points")
    grid = np.linspace(fit.window.start, fit.window.end, points)
    return grid, expected_intensity(fit, grid)


def component_shapes(fit: ModelState, grid) -> np.ndarray:
    """``E[f_k(t)^2]`` on a grid, shape ``(len(grid), K)``."""
    mean, var = predict_moments(fit, grid)
    return mean * mean + var


@dataclass
class EvalConfig:
    samples: int = 100
    seed: int = 0
    grid_points: int = 200
    rate_law: str = "conditional"


@dataclass
class EvalReport:
    variant: str
    K: int
    test_likelihood: float
    test_likelihood_sampled: float | None
    test_likelihood_sampled_se: float | None
    train_likelihood: float
    n_test: int
    n_train: int
    ner: list
    uner: list
    theta_hat: list
    volumes: list
    alpha: float | None
    meta: dict = field(default_factory=dict)

    @property
    def active_count(self) -> int:
        return int(active_components(self.ner).size)

    @property
    def ner_top4(self) -> float:
        return top_mass(self.ner, 4)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format"] = REPORT_FORMAT
        d["version"] = REPORT_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("format") != REPORT_FORMAT:
            raise ValueError("not an evaluation report")
        d = {k: v for k, v in d.items() if k not in ("format", "version")}
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_tables(self, outdir, fit: ModelState | None = None, grid_points: int = 200) -> list[Path]:
        """Flat CSV exports for plotting."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        written = []

        def dump(name, header, rows):
            p = outdir / name
            with open(p, "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(header)
                wr.writerows(rows)
            written.append(p)

        dump("components.csv", ["k", "ner", "uner", "volume"],
             [[k, repr(a), repr(b), repr(c)] for k, (a, b, c) in enumerate(zip(self.ner, self.uner, self.volumes))])
        dump("theta_hat.csv", ["d"] + [f"k{k}" for k in range(self.K)],
             [[d] + [repr(x) for x in row] for d, row in enumerate(self.theta_hat)])
        if fit is not None:
            grid, lam = intensity_curves(fit, grid_points)
            ids = fit.seq_ids or [str(d) for d in range(fit.D)]
            dump("intensity.csv", ["sequence_id", "t", "intensity"],
                 [[ids[d], repr(float(t)), repr(float(lam[d, j]))] for d in range(fit.D) for j, t in enumerate(grid)])
        return written


def build_report(fit: ModelState, train: Dataset, test: Dataset, cfg: EvalConfig | None = None) -> EvalReport:
    cfg = EvalConfig() if cfg is None else cfg
    t0 = time.perf_counter()
    _check_pair(fit, train)
    _check_pair(fit, test)
    lt = test_likelihood_point(fit, test)
    ltr = test_likelihood_point(fit, train)
    if fit.variant == "lppa":
        ls, se = None, None
    else:
        ls, se = test_likelihood_sampled(fit, test, cfg.samples, np.random.default_rng(cfg.seed), cfg.rate_law)
    th = normalized_allocation(fit)
    meta = {
        "tool_version": __version__,
        "eval_config": asdict(cfg),
        "fit_config_hash": fit.meta.get("config_hash"),
        "fit_wall_time": fit.meta.get("wall_time"),
        "eval_wall_time": time.perf_counter() - t0,
    }
    return EvalReport(
        variant=fit.variant,
        K=fit.K,
        test_likelihood=lt,
        test_likelihood_sampled=ls,
        test_likelihood_sampled_se=se,
        train_likelihood=ltr,
        n_test=test.N,
        n_train=train.N,
        ner=th.mean(axis=0).tolist(),
        uner=uner(fit).tolist(),
        theta_hat=th.tolist(),
        volumes=component_volumes(fit).tolist(),
        alpha=None if fit.variant == "lppa" else float(fit.hyper.alpha),
        meta=meta,
    )


__all__ = [
    "ACTIVE_THRESHOLD",
    "EvalConfig",
    "EvalReport",
    "active_components",
    "build_report",
    "component_shapes",
    "intensity_curves",
    "ner",
    "normalized_allocation",
    "test_likelihood_point",
    "test_likelihood_sampled",
    "top_mass",
    "uner",
]
