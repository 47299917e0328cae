"""Central finite-difference oracle.

Only forward evaluations of ``fn`` are used, so the oracle shares no code
path with the analytic backward it checks.
"""

from __future__ import annotations

import numpy as np


def numeric_grad(fn, arr: np.ndarray, eps: float = 1e-6, indices=None) -> np.ndarray:
    """d fn() / d arr by central differences, perturbing ``arr`` in place.

    ``indices`` optionally restricts the check to a subset of flat indices;
    the other entries of the result are NaN.
    """
    flat = arr.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        up = float(fn())
        flat[i] = old - eps
        down = float(fn())
        flat[i] = old
        out[i] = (up - down) / (2 * eps)
    return out.reshape(arr.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| relative to the largest gradient magnitude, over checked (non-NaN) entries."""
    a = np.asarray(analytic, dtype=float).reshape(-1)
    n = np.asarray(numeric, dtype=float).reshape(-1)
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-12)
    return float(np.max(np.abs(a - n)) / scale)


def max_abs_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=float).reshape(-1)
    n = np.asarray(numeric, dtype=float).reshape(-1)
    keep = ~np.isnan(n)
    return float(np.max(np.abs(a[keep] - n[keep])))
