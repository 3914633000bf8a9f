"""Central finite differences for checking hand-written backward passes (float64)."""

from __future__ import annotations

import numpy as np


def numerical_gradient(f, x: np.ndarray, eps: float = 1e-6, coords=None) -> np.ndarray:
    """d f / d x by central differences. ``f`` takes no arguments and reads ``x``.

    ``x`` is perturbed in place and restored. With ``coords`` (a list of index
    tuples) only those entries are estimated; the rest stay 0.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    it = coords if coords is not None else np.ndindex(*x.shape)
    for idx in it:
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a, b) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)
