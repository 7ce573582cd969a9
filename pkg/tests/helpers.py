"""Shared test utilities: finite-difference gradient oracle."""

import numpy as np

from objcap import autodiff as ad


def fd_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_grad(build, x0: np.ndarray, h: float = 1e-6, rtol: float = 1e-5,
               atol: float = 1e-8):
    """Compare engine gradient of build(leaf) against central differences.

    build maps a DiffValue leaf to a scalar DiffValue.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    p = ad.leaf(x0.copy())
    out = build(p)
    ad.backward(out)
    got = p.grad if p.grad is not None else np.zeros_like(x0)

    def f(x):
        return build(ad.constant(x)).value

    want = fd_gradient(f, x0.copy(), h=h)
    np.testing.assert_allclose(got, want, rtol=rtol, atol=atol)
    return got, want


def rel_err(a, b, floor=1e-10):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
