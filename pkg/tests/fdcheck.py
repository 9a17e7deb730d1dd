"""Central finite-difference oracle for gradient checks.

The oracle perturbs raw float64 arrays and re-evaluates a scalar function,
staying independent of the backward rules it is used to verify.
"""

import numpy as np


def numeric_grads(f, arrays, eps=1e-3):
    """Central differences of scalar f(arrays) w.r.t. every array entry."""
    grads = []
    for a in arrays:
        g = np.zeros(a.shape, dtype=np.float64)
        flat, gf = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(arrays)
            flat[i] = orig - eps
            fm = f(arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, atol=1e-7):
    """Worst elementwise |a-n| / max(|a|, |n|), ignoring entries where both
    sides are below atol (relative error is meaningless at true zeros)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(n))
    mask = denom > atol
    if not mask.any():
        return 0.0
    return float((np.abs(a - n)[mask] / denom[mask]).max())
