"""Central finite-difference oracle for gradient checks.

Only ever calls the forward path, so it stays independent of every
backward rule it is used to verify.
"""

import numpy as np


def finite_difference_grad(f, x, h=1e-3, entries=None):
    """Central-difference gradient of scalar-valued ``f`` at array ``x``.

    ``f`` must not mutate its argument. ``entries`` optionally restricts
    the computation to a list of flat indices (returned in that order);
    otherwise the full gradient array is returned.
    """
    x = np.array(x, copy=True)
    flat = x.reshape(-1)
    idxs = range(flat.size) if entries is None else entries
    out = np.empty(len(list(idxs)) if entries is not None else flat.size, dtype=np.float64)
    idxs = range(flat.size) if entries is None else entries
    for pos, i in enumerate(idxs):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        out[pos] = (fp - fm) / (2.0 * h)
    if entries is None:
        return out.reshape(x.shape)
    return out


def relative_error(analytic, numeric, floor=1e-12):
    """Norm-based relative error between two gradient arrays."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)
