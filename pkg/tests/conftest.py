import numpy as np
import pytest


def central_diff(f, x, h=1e-5):
    """Finite-difference gradient of scalar f() wrt array x (perturbed in place)."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
