import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from banppa.model import AugLagMultipliers, Problem, elbo, initial_state
from banppa.optimize import FitConfig, inner_solve, outer_loop, project_positive
from banppa.sequences import from_arrays
from banppa.synthgen import generate, preset

from conftest import random_state


def small_data(D=3, seed=0, window=(0, 20)):
    rng = np.random.default_rng(seed)
    return from_arrays(window, [np.sort(rng.uniform(*window, rng.integers(8, 15))) for _ in range(D)])


def test_project_positive():
    np.testing.assert_array_equal(project_positive([-3.0, 0.0, 2e-6], 1e-6), [1e-6, 1e-6, 2e-6])
    out = project_positive([-1.0, -1.0], 1e-6, mask=np.array([True, False]))
    np.testing.assert_array_equal(out, [1e-6, -1.0])
    with pytest.raises(ValueError):
        project_positive([1.0], 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_project_idempotent(vals):
    once = project_positive(vals, 1e-6)
    assert np.all(once >= 1e-6)
    np.testing.assert_array_equal(project_positive(once, 1e-6), once)


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(inner_tol=0)
    with pytest.raises(ValueError):
        FitConfig(K=1)
    assert FitConfig(variant="BaNPPA").variant == "banppa"
    assert FitConfig().digest() == FitConfig().digest() != FitConfig(seed=1).digest()


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        outer_loop(from_arrays((0, 1), [[]]), FitConfig(K=2, M=3))


@pytest.mark.parametrize("variant", ["lppa", "banppa-nc", "banppa"])
def test_inner_solve_monotone_and_gradient_shrinks(variant):
    ds = small_data()
    cfg = FitConfig(variant=variant, K=3, M=5, inner_tol=1e-6, max_sweeps=10)
    st0 = random_state(ds, variant, K=3, M=5, seed=4)
    mult = AugLagMultipliers.initial(3, st0.A) if variant == "banppa" else None
    pb = Problem(ds)
    st1, info = inner_solve(st0, mult, pb, cfg)
    assert np.all(np.diff(info.trace) >= -1e-9 * np.abs(info.trace[:-1]))
    g0 = pb.evaluate(st0, mult).grads["mu"]
    g1 = pb.evaluate(st1, mult).grads["mu"]
    assert np.abs(g1).max() < 1e-2 * np.abs(g0).max()


def test_stationary_state_takes_no_steps():
    ds = small_data()
    cfg = FitConfig(variant="lppa", K=3, M=5, inner_tol=1e-9, grad_tol=1e-8, max_sweeps=10)
    pb = Problem(ds)
    st1, _ = inner_solve(random_state(ds, "lppa", K=3, M=5), None, pb, cfg)
    loose = FitConfig(**{**cfg.to_dict(), "grad_tol": 1e-3})
    st2, info = inner_solve(st1, None, pb, loose)
    assert info.accepted_steps == 0 and info.sweeps == 0
    assert elbo(st2, ds) == elbo(st1, ds)


def test_multiplier_schedule():
    ds = small_data()
    res = outer_loop(ds, FitConfig(variant="banppa", K=3, M=5, max_outer=3, outer_tol=1e-12, max_sweeps=3))
    vs = [m["v"][0] for m in res.multiplier_trace]
    assert vs == [4.0, 16.0, 64.0]
    assert res.multiplier_trace[0]["w"] == [1.0, 1.0, 1.0]
    h0 = np.array(res.residual_trace[0])
    np.testing.assert_allclose(res.multiplier_trace[1]["w"], 1.0 + 4.0 * h0, rtol=1e-12)


def test_nc_matches_frozen_zero_multipliers():
    ds = small_data(seed=2)
    cfg = FitConfig(variant="banppa-nc", K=3, M=5, seed=3, max_sweeps=4, restarts=1)
    res = outer_loop(ds, cfg)
    init = initial_state(ds, "banppa", 3, 5, np.random.default_rng(3))
    init.variant = "banppa-nc"
    direct, _ = inner_solve(init, AugLagMultipliers.zero(3, init.A), Problem(ds), cfg)
    np.testing.assert_array_equal(direct.mu, res.state.mu)
    assert res.multiplier_trace == []


@pytest.mark.parametrize("variant", ["lppa", "banppa"])
def test_deterministic(variant):
    ds = small_data(seed=5)
    cfg = FitConfig(variant=variant, K=3, M=5, seed=11, max_outer=2, max_sweeps=3)
    a, b = outer_loop(ds, cfg), outer_loop(ds, cfg)
    assert json.dumps(a.numeric_traces()) == json.dumps(b.numeric_traces())
    np.testing.assert_array_equal(a.state.mu, b.state.mu)


def test_fit_metadata_and_traces(tmp_path):
    ds = small_data()
    res = outer_loop(ds, FitConfig(variant="banppa", K=2, M=4, max_outer=2, max_sweeps=2))
    meta = res.state.meta
    assert {"wall_time", "config", "config_hash", "train_objective", "train_elbo", "multipliers"} <= set(meta)
    p = res.write_traces(tmp_path / "t.csv")
    header = p.read_text().splitlines()[0]
    assert header == "outer,sweep,objective,elbo,max_rel_residual"
    assert res.termination in {"converged", "max-iterations"}


def test_banppa_constraint_tightens():
    ds, _ = generate(preset("A", seed=1, D=40))
    res = outer_loop(ds, FitConfig(variant="banppa", K=4, M=10, max_outer=5, outer_tol=1e-9))
    A = res.state.A
    rel = [np.max(np.abs(h)) / A for h in res.residual_trace]
    assert rel[-1] < rel[0]
    assert rel[-1] < 0.05


def test_restarts_keep_best_final_objective():
    ds = small_data(seed=6)
    cfg = FitConfig(variant="lppa", K=3, M=5, seed=2, restarts=3, max_sweeps=4)
    res = outer_loop(ds, cfg)
    one = FitConfig(**{**cfg.to_dict(), "restarts": 1})
    vals = []
    for rng in (np.random.default_rng(2), np.random.default_rng([2, 1]), np.random.default_rng([2, 2])):
        st = initial_state(ds, "lppa", 3, 5, rng)
        vals.append(outer_loop(ds, one, state=st).state.meta["train_objective"])
    assert res.state.meta["start_objectives"] == pytest.approx(vals, rel=1e-12)
    assert res.state.meta["train_objective"] == max(vals)
    assert res.state.meta["start"] == int(np.argmax(vals))
    single = outer_loop(ds, one).state
    assert single.meta["train_objective"] == pytest.approx(vals[0], rel=1e-12)
    with pytest.raises(ValueError):
        FitConfig(restarts=0)
