"""Pure-numpy kernels. Reference implementation and fallback backend.

All row-wise kernels take a 2D array whose last axis is the reduction
axis; callers are responsible for folding higher-rank tensors. Outputs
keep the input dtype so the same functions serve float32 training and
float64 oracle checks.
"""

import numpy as np


def relu_fwd(x):
    return np.maximum(x, 0.0).astype(x.dtype, copy=False)


def relu_bwd(x, gy):
    # subgradient at exactly 0 is defined as 0
    return np.where(x > 0.0, gy, 0.0).astype(x.dtype, copy=False)


def layer_norm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = (x - mean[:, None]) * rstd[:, None]
    y = (xhat * gain + bias).astype(x.dtype, copy=False)
    return y, mean.astype(x.dtype, copy=False), rstd


def layer_norm_bwd(x, mean, rstd, gain, gy):
    d = x.shape[1]
    xhat = (x - mean[:, None]) * rstd[:, None]
    gyg = gy * gain
    m1 = gyg.mean(axis=1, keepdims=True)
    m2 = (gyg * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gyg - m1 - xhat * m2)
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    del d
    return (
        gx.astype(x.dtype, copy=False),
        ggain.astype(x.dtype, copy=False),
        gbias.astype(x.dtype, copy=False),
    )


def softmax_fwd(x):
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return (z / z.sum(axis=1, keepdims=True)).astype(x.dtype, copy=False)


def softmax_bwd(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return ((gy - dot) * y).astype(y.dtype, copy=False)


def cross_entropy_fwd(logits, targets, ignore_id):
    m = logits.max(axis=1, keepdims=True)
    z = np.exp(logits - m)
    s = z.sum(axis=1, keepdims=True)
    probs = (z / s).astype(logits.dtype, copy=False)
    keep = targets != ignore_id
    n_kept = int(keep.sum())
    if n_kept == 0:
        return logits.dtype.type(0.0), probs, 0
    rows = np.nonzero(keep)[0]
    t = targets[rows]
    logp = (logits[rows, t] - m[rows, 0]) - np.log(s[rows, 0])
    loss = -logp.sum() / n_kept
    return logits.dtype.type(loss), probs, n_kept


def cross_entropy_bwd(probs, targets, ignore_id, n_kept, gloss):
    g = np.zeros_like(probs)
    if n_kept == 0:
        return g
    rows = np.nonzero(targets != ignore_id)[0]
    g[rows] = probs[rows]
    g[rows, targets[rows]] -= 1.0
    g[rows] *= gloss / n_kept
    return g
