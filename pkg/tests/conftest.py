import numpy as np
import pytest

from maddc.operators import StateGrid, TransitionKernel


def random_stochastic(n, rng, concentration=1.0):
    """Random row-stochastic matrix with strictly positive entries."""
    raw = rng.gamma(concentration, size=(n, n)) + 1e-3
    return raw / raw.sum(axis=1, keepdims=True)


def line_grid(n):
    return StateGrid(np.arange(n, dtype=float).reshape(-1, 1))


def random_kernel(n, rng):
    return TransitionKernel(random_stochastic(n, rng), line_grid(n))


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)
