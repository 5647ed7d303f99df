import numpy as np
import pytest

from gradcon import autodiff as ad


@pytest.fixture(autouse=True)
def float64_session():
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(np.float64)


def numeric_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar-valued f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(np.max(np.abs(numeric)), 1e-10)
    return np.max(np.abs(analytic - numeric)) / scale
