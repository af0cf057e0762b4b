import numpy as np
import pytest


def fd_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar-valued f at x (independent oracle)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def rel_err(a, b):
    """Max-norm relative error between analytic and finite-difference grads."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


@pytest.fixture
def rng():
    return np.random.default_rng(0)
