"""Central finite-difference helpers for verifying backward passes."""

import numpy as np

# Denominator floor so that entries where both gradients vanish compare as 0.
REL_FLOOR = 1e-3


def numerical_gradient(f, x, step=1e-4, indices=None):
    """Central differences of the scalar function ``f`` at array ``x``.

    ``x`` is perturbed in place and restored.  When ``indices`` (flat
    positions) is given, only those entries are estimated and the result is a
    1-D array aligned with ``indices``; otherwise the full gradient is returned.
    """
    flat = x.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    out = []
    for i in positions:
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        out.append((up - down) / (2 * step))
    out = np.asarray(out, dtype=np.float64)
    return out.reshape(x.shape) if indices is None else out


def relative_error(analytic, numeric, floor=REL_FLOOR):
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
