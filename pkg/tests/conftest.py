"""Shared fixtures and numerical helpers for the test suite."""

import numpy as np
import pytest

from dyntex import tensor as T
from dyntex import msoe, vgg


def check_gradients(make, arrays, n_coords=20, step=1e-3, seed=0):
    """Max relative error of analytic gradients vs central differences.

    `make(arrays)` must build a fresh graph from plain float64 arrays and
    return `(root, leaves)` where `root` is a scalar Tensor and `leaves`
    are the Tensor nodes wrapping each array, in order.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    root, leaves = make(arrays)
    grads = T.backward(root, np.ones_like(root.data), leaves)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for li, a in enumerate(arrays):
        k = min(n_coords, a.size)
        for flat in rng.choice(a.size, size=k, replace=False):
            pos = np.unravel_index(int(flat), a.shape)

            def value_at(delta):
                mod = [x.copy() for x in arrays]
                mod[li][pos] += delta
                r, _ = make(mod)
                return float(r.data)

            fd = (value_at(step) - value_at(-step)) / (2.0 * step)
            an = float(grads[li][pos])
            scale = max(abs(fd), abs(an), 1e-8)
            worst = max(worst, abs(fd - an) / scale)
    return worst


def scalar(node):
    """Reduce any Tensor to a scalar via summation for gradient checks."""
    return T.tsum(node)


@pytest.fixture(scope="session")
def vgg_weights_small():
    return vgg.VggWeights.random(seed=11)


@pytest.fixture(scope="session")
def msoe_weights_small():
    return msoe.MsoeWeights.random(seed=12)
