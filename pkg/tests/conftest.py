"""Shared oracles and fixtures.

The finite-difference checker below is the independent gradient oracle: it
only ever calls forward evaluations, so it cannot inherit a bug from the
backward closures it is checking.
"""

import numpy as np
import pytest

from gramdiff import data, training
from gramdiff.grammar import GrammarModel

FD_H = 1e-5


def finite_difference_grad(f, x, h=FD_H):
    """Central-difference gradient of a scalar function at a 2-D point."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            up, down = x.copy(), x.copy()
            up[i, j] += h
            down[i, j] -= h
            g[i, j] = (f(up) - f(down)) / (2.0 * h)
    return g


def assert_grad_close(analytic, f, x, rtol=1e-5, atol=1e-8):
    numeric = finite_difference_grad(f, x)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


# hyperparameters pinned for the toy recovery runs: lr 0.1 decayed x0.1 every
# 50 epochs, 400 epochs, tau 1, branching factor 2; the branch cap is sized
# for the toy problem (see the acceptance module).
TOY_CONFIG = dict(branching_factor=2, max_branches=128, epochs=400,
                  learning_rate=0.1, lr_decay_every=50, lr_decay_factor=10.0,
                  temperature=1.0)
TOY_SEED = 0


def train_toy_model(seed, count=200, length=12, **overrides):
    records = data.builtin_toy_dataset(count, length, seed=seed)
    config = training.TrainConfig(seed=seed, **{**TOY_CONFIG, **overrides})
    model = GrammarModel(3, 2, 3, seed=seed)
    report = training.train(model, records, config)
    return model, report, records


@pytest.fixture(scope="session")
def trained_toy():
    """One full-length toy training run, shared by every module that needs a
    converged model (several minutes; train once)."""
    model, report, records = train_toy_model(TOY_SEED)
    return model, report, records
