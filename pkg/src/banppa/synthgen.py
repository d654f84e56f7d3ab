"""Synthetic corpora built from normalised Gaussian-bump basis intensities.

Each sequence has intensity ``lambda_d(t) = c * s_d * sum_k theta_dk b_k(t)``
where ``b_k`` integrates to one over the window, ``s_d ~ Gamma(2, rate 3)``,
``theta_d`` is Dirichlet and ``c`` is a global intensity scale (see
``SynthSpec.intensity_scale``). Events are drawn by thinning.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .sequences import Dataset, TimeWindow, sample_inhomogeneous_pp

BUMP_DENOM = 10.0  # exp(-(t - c)^2 / 10)
GRID_POINTS = 10_000
BOUND_MARGIN = 1.01
PRESET_LENGTHSCALE = 4.3081


@dataclass(frozen=True)
class SynthSpec:
    which: str
    D: int
    window: tuple[float, float]
    centers: tuple[tuple[float, ...], ...]
    dirichlet: tuple[float, ...]
    gamma_shape: float = 2.0
    gamma_rate: float = 3.0
    intensity_scale: float = 100.0
    seed: int = 0
    fixed_lengthscale: float | None = None

    def __post_init__(self):
        if len(self.centers) != len(self.dirichlet):
            raise ValueError("one Dirichlet parameter per basis")
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if not (self.gamma_shape > 0 and self.gamma_rate > 0 and self.intensity_scale > 0):
            raise ValueError("rate-law parameters must be positive")

    @property
    def K(self) -> int:
        return len(self.centers)

    @property
    def time_window(self) -> TimeWindow:
        return TimeWindow(*self.window)

    def bimodal(self, k: int) -> bool:
        """Whether basis ``k`` has more than one bump centred inside the window."""
        lo, hi = self.window
        return sum(lo <= c <= hi for c in self.centers[k]) > 1

    def with_seed(self, seed: int) -> "SynthSpec":
        return SynthSpec(**{**asdict(self), "seed": int(seed)})


def _preset(which: str) -> SynthSpec:
    which = which.upper()
    if which == "A":
        return SynthSpec("A", 200, (0.0, 60.0),
                         tuple((15.0 - 10 * k, 55.0 - 10 * k) for k in range(4)),
                         (1.2, 1.0, 0.8, 0.6))
    if which == "B":
        return SynthSpec("B", 250, (0.0, 80.0),
                         tuple((15.0 - 10 * k, 75.0 - 10 * k) for k in range(6)),
                         (1.2, 1.0, 0.8, 0.6, 0.5, 0.5))
    if which == "C":
        return SynthSpec("C", 200, (0.0, 60.0), tuple((10.0 * k - 5,) for k in range(1, 7)),
                         (0.8, 0.4, 0.2, 0.2, 0.2, 0.2), fixed_lengthscale=PRESET_LENGTHSCALE)
    if which == "D":
        return SynthSpec("D", 200, (0.0, 80.0), tuple((10.0 * k - 5,) for k in range(1, 9)),
                         (0.8, 0.4, 0.4, 0.2, 0.2, 0.2, 0.1, 0.1), fixed_lengthscale=PRESET_LENGTHSCALE)
    if which == "E":
        return SynthSpec("E", 200, (0.0, 100.0), tuple((10.0 * k - 5,) for k in range(1, 11)),
                         (0.8, 0.6, 0.4, 0.4, 0.4, 0.2, 0.2, 0.2, 0.1, 0.1),
                         fixed_lengthscale=PRESET_LENGTHSCALE)
    raise ValueError(f"unknown synthetic variant {which!r}; expected one of A-E")


VARIANTS = ("A", "B", "C", "D", "E")


def preset(which: str, seed: int = 0, **overrides) -> SynthSpec:
    base = _preset(which)
    return SynthSpec(**{**asdict(base), "seed": int(seed), **overrides})


def _bump_mass(c: float, lo: float, hi: float) -> float:
    # int_lo^hi exp(-(t-c)^2 / 10) dt
    s = np.sqrt(BUMP_DENOM)
    return 0.5 * np.sqrt(np.pi) * s * (erf((hi - c) / s) - erf((lo - c) / s))


def basis_eval(spec: SynthSpec, k: int, t) -> np.ndarray:
    """Basis ``k`` normalised to unit integral over the window."""
    if not 0 <= k < spec.K:
        raise IndexError(f"basis index {k} out of range for {spec.K} bases")
    t = np.asarray(t, dtype=float)
    lo, hi = spec.window
    cs = spec.centers[k]
    raw = sum(np.exp(-((t - c) ** 2) / BUMP_DENOM) for c in cs)
    return raw / sum(_bump_mass(c, lo, hi) for c in cs)


def basis_matrix(spec: SynthSpec, t) -> np.ndarray:
    """``(len(t), K)`` matrix of all bases."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return np.stack([basis_eval(spec, k, t) for k in range(spec.K)], axis=1)


@dataclass
class GroundTruth:
    spec: SynthSpec
    s: np.ndarray
    theta: np.ndarray
    ids: list = field(default_factory=list)

    def intensity(self, d: int, t) -> np.ndarray:
        return self.spec.intensity_scale * self.s[d] * (basis_matrix(self.spec, t) @ self.theta[d])

    def expected_count(self, d: int) -> float:
        return float(self.spec.intensity_scale * self.s[d] * self.theta[d].sum())

    def to_dict(self) -> dict:
        sp = asdict(self.spec)
        return {
            "spec": sp,
            "ids": list(self.ids),
            "s": self.s.tolist(),
            "theta": self.theta.tolist(),
            "basis": {
                "form": "sum_c exp(-(t-c)^2/10), normalised to unit integral over the window",
                "centers": [list(c) for c in self.spec.centers],
                "bimodal": [self.spec.bimodal(k) for k in range(self.spec.K)],
            },
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "GroundTruth":
        d = json.loads(Path(path).read_text())
        sp = d["spec"]
        sp["window"] = tuple(sp["window"])
        sp["centers"] = tuple(tuple(c) for c in sp["centers"])
        sp["dirichlet"] = tuple(sp["dirichlet"])
        return cls(SynthSpec(**sp), np.asarray(d["s"]), np.asarray(d["theta"]), d["ids"])


def generate(spec: SynthSpec) -> tuple[Dataset, GroundTruth]:
    """Draw rates, weights and events; one spawned sub-seed per sequence."""
    window = spec.time_window
    grid = np.linspace(window.start, window.end, GRID_POINTS)
    B = basis_matrix(spec, grid)
    children = np.random.SeedSequence(spec.seed).spawn(spec.D)
    alpha = np.asarray(spec.dirichlet)
    s = np.empty(spec.D)
    theta = np.empty((spec.D, spec.K))
    seqs = []
    ids = [f"seq{d:04d}" for d in range(spec.D)]
    for d, child in enumerate(children):
        rng = np.random.default_rng(child)
        s[d] = rng.gamma(spec.gamma_shape, 1.0 / spec.gamma_rate)
        theta[d] = rng.dirichlet(alpha)
        w = spec.intensity_scale * s[d] * theta[d]
        bound = float(np.max(B @ w)) * BOUND_MARGIN

        def lam(t, w=w):
            return basis_matrix(spec, t) @ w

        seqs.append(sample_inhomogeneous_pp(lam, bound, window, rng, id=ids[d]))
    return Dataset(window, tuple(seqs)), GroundTruth(spec, s, theta, ids)


def ground_truth_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".truth.json")


__all__ = [
    "GroundTruth",
    "PRESET_LENGTHSCALE",
    "SynthSpec",
    "VARIANTS",
    "basis_eval",
    "basis_matrix",
    "generate",
    "ground_truth_path",
    "preset",
]
