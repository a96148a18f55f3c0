import numpy as np
import pytest

from mfgkit.config import default_additive_model
from mfgkit.measures import Grid, ProbVector
from mfgkit.model import tabular_model, toy_model


@pytest.fixture(scope="session")
def toy():
    return toy_model()


@pytest.fixture(scope="session")
def additive():
    return default_additive_model()


def identity_model(n=3, n_actions=2, beta=0.9, cost=None, mu0=None):
    """Every action keeps the state; optional cost table."""
    K = np.zeros((n, n_actions, n))
    for x in range(n):
        K[x, :, x] = 1.0
    C = np.zeros((n, n_actions)) if cost is None else np.asarray(cost, dtype=float)
    return tabular_model(np.arange(n, dtype=float), np.arange(n_actions, dtype=float), K, C,
                         beta=beta, mu0=mu0)


def random_tabular(rng, n=4, n_actions=3, beta=0.8, coupled=True):
    K = rng.random((n, n_actions, n))
    K /= K.sum(axis=2, keepdims=True)
    C = rng.random((n, n_actions))
    D = rng.random((n, n_actions, n)) if coupled else None
    mu0 = rng.random(n)
    return tabular_model(np.arange(n, dtype=float), np.arange(n_actions, dtype=float), K, C,
                         beta=beta, mu0=mu0 / mu0.sum(), cost_coupling=D)


def random_prob(rng, grid, sparsity=0.0):
    m = rng.random(grid.size)
    if sparsity:
        m[rng.random(grid.size) < sparsity] = 0.0
        if m.sum() == 0:
            m[0] = 1.0
    return ProbVector.from_mass(grid, m / m.sum())


def grid_of(points):
    return Grid(np.asarray(points, dtype=float))
