import numpy as np
import pytest


def fd_grad(f, x, eps=1e-6):
    """Central differences of a float-valued numpy function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        v = flat[i]
        flat[i] = v + eps
        fp = f(x)
        flat[i] = v - eps
        fm = f(x)
        flat[i] = v
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
