import json
from pathlib import Path

import numpy as np
import pytest

from banppa.sequences import from_arrays

ORACLES = json.loads((Path(__file__).parent / "oracles" / "frozen.json").read_text())


@pytest.fixture
def oracles():
    return ORACLES


@pytest.fixture
def tiny_dataset():
    rng = np.random.default_rng(3)
    return from_arrays((0.0, 10.0), [np.sort(rng.uniform(0, 10, n)) for n in (5, 8, 3)])


def random_state(ds, variant, K=3, M=5, seed=0):
    """A state away from the prior, for gradient and update checks."""
    from banppa.model import initial_state

    rng = np.random.default_rng(seed)
    st = initial_state(ds, variant, K, M, rng)
    st.mu = st.mu + 0.5 * rng.standard_normal(st.mu.shape)
    chol = np.tril(st.chol + 0.1 * rng.standard_normal(st.chol.shape))
    idx = np.arange(M)
    chol[:, idx, idx] = np.abs(chol[:, idx, idx]) + 0.1
    st.chol = chol
    st.lengthscales = rng.uniform(1.5, 3.0, K)
    if st.tau is not None:
        st.tau = rng.uniform(0.5, 3.0, st.tau.shape)
        st.eta = rng.uniform(0.5, 2.0, st.D)
    else:
        st.theta = rng.uniform(0.1, 1.0, st.theta.shape)
    return st


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
