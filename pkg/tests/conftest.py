"""Shared numerical helpers for the test suite."""

import numpy as np


def central_difference(func, x, step=1e-6):
    """Numerical gradient of a scalar function at x, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = step
        hi = func((flat + bump).reshape(x.shape))
        lo = func((flat - bump).reshape(x.shape))
        out[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_gradient_error(analytic, numeric):
    """Infinity-norm error of analytic vs numeric, relative to the larger scale."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), 1e-12)
    return float(np.abs(analytic - numeric).max()) / scale
