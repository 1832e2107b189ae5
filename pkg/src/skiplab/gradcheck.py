"""Central finite differences for checking the hand-written gradients."""

from __future__ import annotations

import numpy as np


def central_diff(fun, x, h=1e-5) -> np.ndarray:
    """Numerical gradient of a scalar function of a flat vector."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = fun(x)
        x[i] = old - h
        fm = fun(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def mismatch(analytic, numeric, atol=1e-8) -> float:
    """Worst relative error |a - n| / |n| over entries whose absolute error exceeds ``atol``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    err = np.abs(a - n)
    rel = np.where(err <= atol, 0.0, err / np.maximum(np.abs(n), 1e-300))
    return float(rel.max(initial=0.0))
