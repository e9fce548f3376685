"""Shared numerical oracles for the test suite."""

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Full central-difference gradient of a scalar function at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def central_diff_at(f, x: np.ndarray, idx: tuple, h: float = 1e-5) -> float:
    """Central difference of scalar f along one coordinate of x."""
    orig = x[idx]
    x[idx] = orig + h
    fp = f(x)
    x[idx] = orig - h
    fm = f(x)
    x[idx] = orig
    return (fp - fm) / (2.0 * h)


def rel_err(a, b) -> float:
    """Worst-case elementwise relative error, guarded for tiny magnitudes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3)
    return float(np.max(np.abs(a - b) / denom))
