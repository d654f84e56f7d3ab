"""End-to-end acceptance criteria, one test per criterion.

Fits on the synthetic corpora are cached under ``.acceptance_cache/`` keyed
by the dataset, the fit configuration and a hash of the package sources, so
a rerun against unchanged code reuses them (fits are deterministic). Set
``BANPPA_ACCEPTANCE_CACHE=0`` to refit from scratch. Every test records one
PASS/FAIL line that is printed in the terminal summary.
"""
import hashlib
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

import banppa
from banppa.evaluate import component_shapes, ner, test_likelihood_point as lik_point
from banppa.gp import (
    KernelParams,
    PseudoInputs,
    SparseGPPosterior,
    expected_integral_square,
    predictive_moments,
    psi_matrix,
)
from banppa.gtable import expected_log_square
from banppa.model import (
    AugLagMultipliers,
    ModelState,
    Problem,
    component_volumes,
    elbo,
    initial_state,
    update_alpha_closed_form,
    update_eta_closed_form,
)
from banppa.optimize import FitConfig, outer_loop
from banppa.sequences import TimeWindow, from_arrays, sample_inhomogeneous_pp, split_train_test
from banppa.synthgen import basis_matrix, generate, preset

from conftest import ACCEPTANCE_LINES, random_state

pytestmark = pytest.mark.slow

ROOT = Path(__file__).resolve().parent.parent
CACHE = ROOT / ".acceptance_cache"
USE_CACHE = os.environ.get("BANPPA_ACCEPTANCE_CACHE", "1") != "0"
SEEDS = (0, 1, 2, 3, 4)
LPPA_KS = (2, 4, 6)
ALPHAS = (1.1, 2.0, 4.0, 6.0, 8.0)


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def _source_hash():
    h = hashlib.sha256()
    pkg = Path(banppa.__file__).parent
    for p in sorted(pkg.glob("*.py")) + sorted(pkg.glob("*.pyx")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


SOURCE_HASH = _source_hash()


def _data_hash(ds):
    h = hashlib.sha256(repr((ds.window.start, ds.window.end, ds.ids)).encode())
    times, owner = ds.flat()
    h.update(times.tobytes())
    h.update(owner.tobytes())
    return h.hexdigest()[:16]


_memo = {}


def fit(ds, cfg: FitConfig) -> ModelState:
    key = f"{_data_hash(ds)}-{cfg.digest()}-{SOURCE_HASH}"
    if key in _memo:
        return _memo[key]
    path = CACHE / f"{key}.json"
    if USE_CACHE and path.exists():
        st = ModelState.load(path)
    else:
        res = outer_loop(ds, cfg)
        st = res.state
        st.meta["termination"] = res.termination
        if USE_CACHE:
            CACHE.mkdir(exist_ok=True)
            st.save(path)
    _memo[key] = st
    return st


_data = {}


def synthetic_a(seed):
    if seed not in _data:
        ds, truth = generate(preset("A", seed=seed))
        tr, te = split_train_test(ds, np.random.default_rng(seed + 1000))
        _data[seed] = (tr, te, truth)
    return _data[seed]


def cfg_for(variant, K, seed, **kw):
    return FitConfig(variant=variant, K=K, M=18, seed=seed, **kw)


# --- 1 ---------------------------------------------------------------------------


def _fd_errors(st, ds, mult, step=1e-5, floor=1e-6):
    pb = Problem(ds)
    grads = pb.evaluate(st, mult).grads
    errs = []
    K, M = st.mu.shape
    coords = [("mu", i) for i in np.ndindex(st.mu.shape)]
    coords += [("chol", (k, i, j)) for k in range(K) for i in range(M) for j in range(i + 1)]
    coords += [("tau", i) for i in np.ndindex(st.tau.shape)]
    coords += [("lengthscales", (k,)) for k in range(K)]
    for block, idx in coords:
        plus, minus = st.copy(), st.copy()
        getattr(plus, block)[idx] += step
        getattr(minus, block)[idx] -= step
        fd = (pb.evaluate(plus, mult, grad=False).value - pb.evaluate(minus, mult, grad=False).value) / (2 * step)
        an = grads[block][idx]
        errs.append(abs(fd - an) / max(abs(fd), abs(an), floor))
    return np.array(errs)


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    worst = 0.0
    for inst in range(20):
        rng = np.random.default_rng(100 + inst)
        ds = _random_small_dataset(rng)
        st = random_state(ds, "banppa", K=3, M=5, seed=inst)
        mult = AugLagMultipliers(rng.normal(0, 1, 3), rng.uniform(1, 10, 3), st.A)
        worst = max(worst, _fd_errors(st, ds, mult).max())
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and dt < 60
    record(1, ok, f"max relative FD error {worst:.2e} (< 1e-4) over 20 instances, {dt:.1f}s (< 60s)")
    assert ok


def _random_small_dataset(rng):
    return from_arrays((0.0, 10.0), [np.sort(rng.uniform(0, 10, rng.integers(2, 9))) for _ in range(3)])


# --- 2 ---------------------------------------------------------------------------


def test_criterion_02_gp_expectations():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_z = 0.0
    for m in (-4.0, -1.0, 0.0, 0.5, 3.0):
        for v in (0.1, 0.5, 1.0, 2.0, 10.0):
            f = rng.normal(m, np.sqrt(v), 10**6)
            lf = np.log(f * f)
            se = lf.std(ddof=1) / np.sqrt(f.size)
            worst_z = max(worst_z, abs(expected_log_square(m, v) - lf.mean()) / se)

    w = TimeWindow(0, 30)
    pi = PseudoInputs.equispaced(w, 7)
    worst_vol = 0.0
    t = np.linspace(0, 30, 20001)
    for _ in range(5):
        p = KernelParams(rng.uniform(0.5, 2), rng.uniform(1.5, 5))
        L = np.tril(rng.standard_normal((7, 7)) * 0.3)
        L[np.diag_indices(7)] = np.abs(L[np.diag_indices(7)]) + 0.2
        post = SparseGPPosterior(rng.standard_normal(7), L)
        mean, var = predictive_moments(post, p, pi, t)
        grid = integrate.simpson(mean * mean + var, x=t)
        worst_vol = max(worst_vol, abs(expected_integral_square(post, p, pi, w) / grid - 1))

    worst_psi = 0.0
    for gamma, a, z, win in ((1.0, 4.3081, [0.0, 20.0, 45.0, 60.0], (0, 60)), (2.5, 6.0, [7.5, 22.0, 41.0], (0, 50))):
        kp = KernelParams(gamma, a)
        psi = psi_matrix(kp, PseudoInputs(np.array(z)), TimeWindow(*win))
        for i in range(len(z)):
            for j in range(len(z)):
                ref, _ = integrate.quad(
                    lambda s: gamma**2 * np.exp(-((s - z[i]) ** 2 + (s - z[j]) ** 2) / (2 * a * a)),
                    *win, epsabs=0, epsrel=1e-13, limit=200, points=sorted({z[i], z[j]}))
                worst_psi = max(worst_psi, abs(psi[i, j] / ref - 1))
    dt = time.perf_counter() - t0
    ok = worst_z < 3 and worst_vol < 1e-4 and worst_psi < 1e-8 and dt < 120
    record(2, ok, f"E ln f^2 max |z| {worst_z:.2f} (< 3); volume rel {worst_vol:.1e} (< 1e-4); "
                  f"Psi rel {worst_psi:.1e} (< 1e-8); {dt:.0f}s")
    assert ok


# --- 3 ---------------------------------------------------------------------------


def test_criterion_03_bounds():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    lemma_fail = 0
    for _ in range(1000):
        K = rng.integers(1, 6)
        mu = rng.normal(0, 2, K)
        sd = rng.uniform(0.05, 3, K)
        Y = rng.normal(mu, sd, (4000, K))
        vals = logsumexp(Y, axis=1)
        lhs = logsumexp(mu)
        if lhs > vals.mean() + 3 * vals.std(ddof=1) / np.sqrt(vals.size):
            lemma_fail += 1

    ws = np.linspace(-5, 5, 21)
    vs = np.geomspace(1e-3, 1e3, 13)
    hs = np.linspace(-10, 10, 41)
    W, Vv, H = np.meshgrid(ws, vs, hs, indexing="ij")
    floor_ok = bool(np.all(W * H + 0.5 * Vv * H * H >= -(W * W) / (2 * Vv) - 1e-12 * (1 + np.abs(W * H))))

    closed_fail = 0
    for inst in range(100):
        ds = _random_small_dataset(np.random.default_rng(500 + inst))
        st = random_state(ds, "banppa", K=3, M=5, seed=inst)
        before = elbo(st, ds)
        st.eta = update_eta_closed_form(st, ds)
        mid = elbo(st, ds)
        st.hyper.alpha = update_alpha_closed_form(st)
        after = elbo(st, ds)
        closed_fail += int(mid < before - 1e-9 or after < mid - 1e-9)
    dt = time.perf_counter() - t0
    ok = lemma_fail == 0 and floor_ok and closed_fail == 0 and dt < 120
    record(3, ok, f"lemma violations {lemma_fail}/1000; penalty floor exact on grid: {floor_ok}; "
                  f"closed-form decreases {closed_fail}/100; {dt:.0f}s")
    assert ok


# --- 4 ---------------------------------------------------------------------------


def test_criterion_04_constraint():
    tr, _, _ = synthetic_a(0)
    t0 = time.perf_counter()
    st = fit(tr, cfg_for("banppa", 14, 0))
    dt = st.meta.get("wall_time", time.perf_counter() - t0)
    V = component_volumes(st)
    A = st.A
    active = ner(st) >= 0.01
    rel = np.abs(V[active] - A) / A
    spread = V[active].max() / V[active].min() - 1
    ok = bool(np.all(rel < 0.05)) and spread <= 0.05 and dt <= 900
    record(4, ok, f"{active.sum()} active; max |h|/A {rel.max():.4f} (< 0.05); volume spread {spread:.4f} "
                  f"(<= 0.05); fit {dt:.0f}s (<= 900s); A = {A:.2f}")
    assert ok


# --- 5 ---------------------------------------------------------------------------


def _cosines(st, spec, grid):
    shapes = component_shapes(st, grid)
    B = basis_matrix(spec, grid)
    dot = integrate.trapezoid(shapes[:, :, None] * B[:, None, :], grid, axis=0)
    na = np.sqrt(integrate.trapezoid(shapes**2, grid, axis=0))
    nb = np.sqrt(integrate.trapezoid(B**2, grid, axis=0))
    return dot / np.outer(na, nb)


def test_criterion_05_recovery():
    masses, mins, zb, zl = [], [], [], []
    for seed in SEEDS[:3]:
        tr, _, truth = synthetic_a(seed)
        st = fit(tr, cfg_for("banppa", 14, seed))
        lp = fit(tr, cfg_for("lppa", 14, seed))
        nv = ner(st)
        top = np.argsort(nv)[::-1][:4]
        masses.append(nv[top].sum())
        C = _cosines(st, truth.spec, np.linspace(0, 60, 2001))[top]
        r, c = linear_sum_assignment(-C)
        mins.append(C[r, c].min())
        zb.append(int((nv < 0.01).sum()))
        zl.append(int((ner(lp) < 0.01).sum()))
    m_mass, m_cos = float(np.mean(masses)), float(np.mean(mins))
    ok = m_mass >= 0.85 and m_cos >= 0.9 and np.mean(zl) < np.mean(zb)
    record(5, ok, f"mean top-4 NER mass {m_mass:.3f} (>= 0.85); mean worst matched cosine {m_cos:.3f} (>= 0.9); "
                  f"zero-NER components LPPA {np.mean(zl):.1f} < BaNPPA {np.mean(zb):.1f}; per seed "
                  f"mass {np.round(masses, 3).tolist()} cos {np.round(mins, 3).tolist()}")
    assert ok


# --- 6 ---------------------------------------------------------------------------


def test_criterion_06_predictive_ordering():
    lb, l14 = [], []
    lsmall = {K: [] for K in LPPA_KS}
    for seed in SEEDS:
        tr, te, _ = synthetic_a(seed)
        lb.append(lik_point(fit(tr, cfg_for("banppa", 14, seed)), te))
        l14.append(lik_point(fit(tr, cfg_for("lppa", 14, seed)), te))
        for K in LPPA_KS:
            lsmall[K].append(lik_point(fit(tr, cfg_for("lppa", K, seed)), te))
    mb, m14 = float(np.mean(lb)), float(np.mean(l14))
    means = {K: float(np.mean(v)) for K, v in lsmall.items()}
    kbest = max(means, key=means.get)
    best = means[kbest]
    gap = (mb - best) / abs(best)
    ok = mb >= m14 and best > m14 and gap >= -0.02
    record(6, ok, f"BaNPPA {mb:.1f} >= LPPA K=14 {m14:.1f}; LPPA best K={kbest} {best:.1f} > K=14; "
                  f"BaNPPA relative to best LPPA {100 * gap:+.2f}% (not below -2%; two-sided |gap| <= 2%: "
                  f"{abs(gap) <= 0.02}); LPPA means {dict((k, round(v, 1)) for k, v in means.items())}")
    assert ok


# --- 7 ---------------------------------------------------------------------------


def test_criterion_07_alpha_robustness():
    tr, te, _ = synthetic_a(0)
    res = {}
    for variant in ("banppa", "banppa-nc"):
        res[variant] = [lik_point(fit(tr, cfg_for(variant, 14, 0, alpha=a, learn_alpha=False)), te) for a in ALPHAS]
    sb = max(res["banppa"]) - min(res["banppa"])
    snc = max(res["banppa-nc"]) - min(res["banppa-nc"])
    ok = sb < snc
    record(7, ok, f"test-likelihood spread over alpha {list(ALPHAS)}: BaNPPA {sb:.1f} < BaNPPA-NC {snc:.1f}; "
                  f"BaNPPA {np.round(res['banppa'], 1).tolist()} NC {np.round(res['banppa-nc'], 1).tolist()}")
    assert ok


# --- 8 ---------------------------------------------------------------------------


def _iteration_time(ds, K, repeat=7):
    st = initial_state(ds, "banppa", K, 18, np.random.default_rng(0))
    pb = Problem(ds)
    mult = AugLagMultipliers.initial(K, st.A)
    pb.evaluate(st, mult)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        pb.evaluate(st, mult)
        times.append(time.perf_counter() - t0)
    return min(times)


def test_criterion_08_complexity():
    small, _ = generate(preset("A", seed=8, D=100))
    big, _ = generate(preset("A", seed=8, D=200))
    rk = _iteration_time(big, 14) / _iteration_time(big, 7)
    rn = _iteration_time(big, 14) / _iteration_time(small, 14)
    ok = rk <= 2.5 and rn <= 2.5
    record(8, ok, f"per-iteration time ratio: K 7->14 {rk:.2f}x, N {small.N}->{big.N} {rn:.2f}x (both <= 2.5x)")
    assert ok


# --- 9 ---------------------------------------------------------------------------


def test_criterion_09_thinning():
    w = TimeWindow(0, 10)
    cases = [
        ("constant", lambda t: np.full_like(t, 3.0), 3.0, 30.0),
        ("linear", lambda t: 0.5 * t, 5.0, 25.0),
        ("step", lambda t: 4.0 * (t < 5), 4.0, 20.0),
        ("sine", lambda t: 2 + np.sin(t), 3.0, 20 + 1 - np.cos(10.0)),
        ("bump", lambda t: 8 * np.exp(-((t - 4) ** 2)), 8.0, 4 * np.sqrt(np.pi) * (math.erf(6) + math.erf(4))),
    ]
    R = 10**4
    rng = np.random.default_rng(9)
    worst = 0.0
    for _, lam, bound, Lam in cases:
        counts = np.array([sample_inhomogeneous_pp(lam, bound, w, rng).count for _ in range(R)])
        worst = max(worst, abs(counts.mean() - Lam) / (4 * np.sqrt(Lam / R)))
    ok = worst <= 1.0
    record(9, ok, f"worst |mean - Lambda| / (4 sqrt(Lambda/R)) = {worst:.2f} (<= 1) over 5 intensities, R = 1e4")
    assert ok


# --- 10 --------------------------------------------------------------------------


def _pipeline(d: Path):
    run = lambda *a: subprocess.run([sys.executable, "-m", "banppa.cli", *a], cwd=d, check=True,
                                    capture_output=True)
    run("simulate", "--variant", "A", "--seed", "5", "--D", "20", "--out", "s.events")
    run("split", "--input", "s.events", "--seed", "2", "--train-out", "tr.events", "--test-out", "te.events")
    for v in ("lppa", "banppa"):
        run("fit", "--data", "tr.events", "--variant", v, "--K", "3", "--M", "6", "--max-outer", "2",
            "--seed", "4", "--out", f"{v}.fit.json")
        run("evaluate", "--fit", f"{v}.fit.json", "--test", "te.events", "--train", "tr.events",
            "--samples", "20", "--out", f"{v}.report.json", "--tables", f"{v}_tables")
    run("compare", "--fits", "lppa.fit.json", "banppa.fit.json", "--test", "te.events", "--out", "cmp.csv")
    run("gtable", "--out", "g.npz", "--n1", "100", "--n2", "100")


def _strip_times(obj):
    if isinstance(obj, dict):
        return {k: _strip_times(v) for k, v in obj.items() if "wall_time" not in k}
    if isinstance(obj, list):
        return [_strip_times(v) for v in obj]
    return obj


def _numeric_artifacts(d: Path):
    out = {}
    for p in sorted(d.rglob("*")):
        if p.is_dir():
            continue
        rel = str(p.relative_to(d))
        if p.suffix == ".json":
            out[rel] = json.dumps(_strip_times(json.loads(p.read_text())), sort_keys=True)
        elif p.name == "cmp.csv":
            # drop the wall-time column
            out[rel] = "\n".join(",".join(c for i, c in enumerate(line.split(",")) if i != 6)
                                 for line in p.read_text().splitlines())
        elif p.suffix == ".npz":
            z = np.load(p)
            out[rel] = {k: z[k].tobytes() for k in z.files}
        else:
            out[rel] = p.read_bytes()
    return out


def test_criterion_10_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    _pipeline(a)
    _pipeline(b)
    ra, rb = _numeric_artifacts(a), _numeric_artifacts(b)
    diff = sorted(k for k in ra if ra[k] != rb.get(k))
    ok = set(ra) == set(rb) and not diff
    record(10, ok, f"{len(ra)} artifacts from simulate/split/fit/evaluate/compare/gtable identical across runs"
                   + (f"; differing: {diff}" if diff else ""))
    assert ok
