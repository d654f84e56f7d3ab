"""Look-up table for the function G used in E[ln f^2] of a Gaussian f.

For ``f ~ N(m, v)``::

    E[ln f^2] = -G(-m^2 / (2 v)) - C + ln(v / 2),    C = Euler's constant.

With ``z = m^2 / (2v)`` and ``J ~ Poisson(z)``, ``f^2 / v`` is a noncentral
chi-square with one degree of freedom, i.e. a chi-square with ``1 + 2J``
degrees of freedom, which gives the exact series::

    G(-z) = -sum_j Pois(j; z) psi(j + 1/2) - C - 2 ln 2
    d/dz G(-z) = -sum_j Pois(j; z) / (j + 1/2)

The table stores ``G`` and its derivative on a two-segment grid (uniform
in ``z`` near zero, uniform in ``log z`` beyond) and interpolates with cubic
Hermite polynomials so the interpolant is C^1 and its analytic derivative
is exact for the interpolant. Past the right edge the asymptote
``G(-z) = -(ln 4z + C)`` is used.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import digamma, gammaln

EULER = float(np.euler_gamma)
LN2 = float(np.log(2.0))
TABLE_VERSION = 1
VAR_FLOOR = 1e-12


def g_series(z: float) -> tuple[float, float]:
    """``(G(-z), d/dz G(-z))`` from the Poisson-mixture series."""
    z = float(z)
    if z < 0:
        raise ValueError("z must be >= 0")
    if z == 0.0:
        return 0.0, -2.0
    sd = np.sqrt(z)
    lo = max(0, int(z - 13 * sd - 30))
    hi = int(z + 13 * sd + 30)
    j = np.arange(lo, hi + 1, dtype=float)
    p = np.exp(j * np.log(z) - z - gammaln(j + 1.0))
    s = np.dot(p, digamma(j + 0.5))
    ds = np.dot(p, 1.0 / (j + 0.5))
    return float(-s - EULER - 2 * LN2), float(-ds)


@dataclass(frozen=True)
class GTable:
    """Tabulated ``g(z) = G(-z)``, ``z >= 0``.

    Segment 1 covers ``[0, z1]`` in ``n1`` uniform steps of ``z``; segment 2
    covers ``[z1, zmax]`` in ``n2`` uniform steps of ``log z``. ``y*`` hold
    values and ``d*`` derivatives w.r.t. the segment variable (``z`` or
    ``log z``).
    """

    z1: float
    zmax: float
    n1: int
    n2: int
    y1: np.ndarray
    d1: np.ndarray
    y2: np.ndarray
    d2: np.ndarray
    version: int = TABLE_VERSION
    interpolation: str = "cubic-hermite"

    @property
    def h1(self) -> float:
        return self.z1 / self.n1

    @property
    def hl(self) -> float:
        return (np.log(self.zmax) - np.log(self.z1)) / self.n2

    def eval_z(self, z) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised ``(g(z), g'(z))`` for ``z >= 0``."""
        z = np.asarray(z, dtype=float)
        val = np.empty_like(z)
        der = np.empty_like(z)

        m1 = z <= self.z1
        if np.any(m1):
            v, d = _hermite(z[m1] / self.h1, self.y1, self.d1, self.h1, self.n1)
            val[m1], der[m1] = v, d
        m3 = z >= self.zmax
        m2 = ~m1 & ~m3
        if np.any(m2):
            zz = z[m2]
            s = (np.log(zz) - np.log(self.z1)) / self.hl
            v, d = _hermite(s, self.y2, self.d2, self.hl, self.n2)
            val[m2], der[m2] = v, d / zz
        if np.any(m3):
            zz = z[m3]
            val[m3] = -(np.log(4 * zz) + EULER)
            der[m3] = -1.0 / zz
        return val, der

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "wb") as fh:
            np.savez(
                fh,
                version=self.version,
                interpolation=self.interpolation,
                z1=self.z1,
                zmax=self.zmax,
                n1=self.n1,
                n2=self.n2,
                y1=self.y1,
                d1=self.d1,
                y2=self.y2,
                d2=self.d2,
            )
        return path

    @classmethod
    def load(cls, path) -> "GTable":
        with np.load(path) as f:
            version = int(f["version"])
            if version != TABLE_VERSION:
                raise ValueError(f"unsupported G-table version {version}")
            if str(f["interpolation"]) != "cubic-hermite":
                raise ValueError("unsupported interpolation order")
            return cls(
                z1=float(f["z1"]),
                zmax=float(f["zmax"]),
                n1=int(f["n1"]),
                n2=int(f["n2"]),
                y1=f["y1"].copy(),
                d1=f["d1"].copy(),
                y2=f["y2"].copy(),
                d2=f["d2"].copy(),
            )


def _hermite(s, y, d, h, n):
    # s: position in units of the step; d: derivative w.r.t. the segment variable
    i = np.clip(np.floor(s).astype(np.intp), 0, n - 1)
    t = s - i
    t2, t3 = t * t, t * t * t
    h00 = 2 * t3 - 3 * t2 + 1
    h10 = t3 - 2 * t2 + t
    h01 = -2 * t3 + 3 * t2
    h11 = t3 - t2
    y0, y1 = y[i], y[i + 1]
    m0, m1 = d[i] * h, d[i + 1] * h
    val = h00 * y0 + h10 * m0 + h01 * y1 + h11 * m1
    dval = ((6 * t2 - 6 * t) * y0 + (3 * t2 - 4 * t + 1) * m0
            + (6 * t - 6 * t2) * y1 + (3 * t2 - 2 * t) * m1) / h
    return val, dval


def build_gtable(z1: float = 20.0, zmax: float = 1e6, n1: int = 2000, n2: int = 2000) -> GTable:
    """Tabulate G from the exact series."""
    zs1 = np.linspace(0.0, z1, n1 + 1)
    zs2 = np.exp(np.linspace(np.log(z1), np.log(zmax), n2 + 1))
    y1, d1 = np.array([g_series(z) for z in zs1]).T
    y2, dz2 = np.array([g_series(z) for z in zs2]).T
    return GTable(z1, zmax, n1, n2, y1, d1, y2, dz2 * zs2)


@functools.lru_cache(maxsize=1)
def default_gtable() -> GTable:
    return build_gtable()


def g_lookup(tbl: GTable, x) -> np.ndarray | float:
    """Interpolated ``G(x)`` for ``x <= 0``."""
    xa = np.asarray(x, dtype=float)
    if np.any(xa > 0):
        raise ValueError("G is only defined for x <= 0")
    val, _ = tbl.eval_z(-xa)
    return float(val) if np.ndim(x) == 0 else val


def expected_log_square(mean, var, tbl: GTable | None = None):
    """``E[ln f^2]`` for ``f ~ N(mean, var)``."""
    var_a = np.asarray(var, dtype=float)
    if np.any(var_a <= 0):
        raise ValueError("variance must be positive")
    out, _, _ = expected_log_square_grad(mean, var_a, tbl)
    return float(out) if np.ndim(out) == 0 else out


def expected_log_square_grad(mean, var, tbl: GTable | None = None):
    """Value and partial derivatives w.r.t. mean and variance.

    Variances are clamped below at ``VAR_FLOOR``.
    """
    tbl = default_gtable() if tbl is None else tbl
    mean = np.asarray(mean, dtype=float)
    var = np.maximum(np.asarray(var, dtype=float), VAR_FLOOR)
    z = mean * mean / (2 * var)
    g, dg = tbl.eval_z(z)
    val = -g - EULER + np.log(var / 2)
    d_mean = -dg * mean / var
    d_var = dg * z / var + 1.0 / var
    return val, d_mean, d_var
