"""Shared fixtures and finite-difference helpers."""

import numpy as np
import pytest

from meshflow.primitives import icosphere


@pytest.fixture(scope="session")
def sphere2():
    """Icosphere, 320 faces, radius 0.25 about the image center."""
    return icosphere(0.25, (0.5, 0.5, 0.5), 2)


@pytest.fixture(scope="session")
def sphere3():
    """Icosphere, 1280 faces."""
    return icosphere(0.25, (0.5, 0.5, 0.5), 3)


def central_diff(fn, x, h=1e-6):
    """Dense central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(approx, exact):
    """Relative error normalized by the largest exact entry (avoids blowup
    at symmetric zeros)."""
    scale = max(np.abs(exact).max(), 1e-12)
    return np.abs(approx - exact).max() / scale
