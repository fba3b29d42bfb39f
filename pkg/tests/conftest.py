import os
from pathlib import Path

import numpy as np
import pytest

from diva.dpmm import DpmmPrior, _prior_model, global_step, local_step, summarize

MNIST_DIR = Path(os.environ.get("DIVA_MNIST_DIR", "data/mnist"))


def make_blobs(n, k, radius=10.0, seed=0, dim=2, scale=1.0):
    """n points from k unit-variance blobs whose centres sit on a circle."""
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(k) / k
    centres = np.zeros((k, dim))
    centres[:, 0] = radius * np.cos(angles)
    centres[:, 1] = radius * np.sin(angles)
    labels = rng.integers(k, size=n)
    x = centres[labels] + scale * rng.standard_normal((n, dim))
    return x, labels


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def blobs5():
    """2000 points from five unit-variance blobs on a radius-10 circle."""
    return make_blobs(2000, 5, radius=10.0, seed=7)


@pytest.fixture
def blobs3():
    return make_blobs(600, 3, radius=10.0, seed=3)


def mnist_files():
    names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
    found = []
    for name in names:
        for candidate in (MNIST_DIR / name, MNIST_DIR / f"{name}.gz"):
            if candidate.exists():
                found.append(candidate)
                break
        else:
            return None
    return found


def fitted(x, K, seed=0, sweeps=10, prior=None, hard=None):
    """K-cluster model refined by a few full sweeps, plus its statistics."""
    prior = prior or DpmmPrior.create(x.shape[1])
    rng = np.random.default_rng(seed)
    labels = hard if hard is not None else rng.integers(K, size=x.shape[0])
    model = _prior_model(prior, K=K, component_ids=tuple(range(K)), next_id=K)
    stats = summarize(x, np.eye(K)[labels])
    model = global_step(model, stats)
    for _ in range(sweeps):
        stats = summarize(x, local_step(x, model))
        model = global_step(model, stats)
    return model, stats


def unequal_blobs():
    """Three separated blobs of 60, 300 and 150 points, in that order."""
    rng = np.random.default_rng(8)
    sizes = [60, 300, 150]
    centres = np.array([[0.0, 10.0], [10.0, 0.0], [-10.0, 0.0]])
    x = np.vstack([rng.normal(size=(n, 2)) + c for n, c in zip(sizes, centres)])
    return x, np.repeat([0, 1, 2], sizes)
