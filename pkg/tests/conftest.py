from pathlib import Path

import numpy as np
import pytest

from dasl.data import SynthConfig, build_examples, fold_split, synthetic_dataset
from dasl.model import ModelConfig

FIXTURES = Path(__file__).parent / "fixtures"

TINY_SYNTH = SynthConfig(n_users=60, n_items_A=25, n_items_B=25, max_events=8, seed=5)
TINY_MODEL = ModelConfig(d=6, d_q=3, d_v=5, head_hidden=8)


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` over a numpy array, written independently of the package."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        up = f(x)
        x[i] = orig - h
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture(scope="session")
def tiny_dataset():
    return synthetic_dataset(TINY_SYNTH)[0]


@pytest.fixture(scope="session")
def tiny_examples(tiny_dataset):
    ex = build_examples(tiny_dataset)
    fold_split(ex, 5, seed=1)
    return ex


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
