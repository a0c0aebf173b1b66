"""Kernel backend selection.

The compiled extension is preferred when it imported cleanly; otherwise
(or when ``HYPERADAPTERS_KERNELS=numpy`` is set) every call goes to the
pure-numpy implementation. The compiled kernels only handle contiguous
float32 input, so float64 work (e.g. finite-difference oracles) is routed
to numpy regardless of backend.
"""

import os

import numpy as np

from . import _numpy

_ext = None
if os.environ.get("HYPERADAPTERS_KERNELS", "auto") != "numpy":
    try:
        from . import _core as _ext
    except ImportError:
        _ext = None

BACKEND = "compiled" if _ext is not None else "numpy"


def backend_name():
    return BACKEND


def _f32c(a):
    return a.dtype == np.float32 and a.flags["C_CONTIGUOUS"]


def relu_fwd(x):
    if _ext is not None and _f32c(x):
        return _ext.relu_fwd(x.reshape(-1)).reshape(x.shape)
    return _numpy.relu_fwd(x)


def relu_bwd(x, gy):
    if _ext is not None and _f32c(x) and _f32c(gy):
        return _ext.relu_bwd(x.reshape(-1), gy.reshape(-1)).reshape(x.shape)
    return _numpy.relu_bwd(x, gy)


def layer_norm_fwd(x, gain, bias, eps):
    if _ext is not None and _f32c(x) and _f32c(gain) and _f32c(bias):
        return _ext.layer_norm_fwd(x, gain, bias, eps)
    return _numpy.layer_norm_fwd(x, gain, bias, eps)


def layer_norm_bwd(x, mean, rstd, gain, gy):
    if _ext is not None and all(_f32c(a) for a in (x, mean, rstd, gain, gy)):
        return _ext.layer_norm_bwd(x, mean, rstd, gain, gy)
    return _numpy.layer_norm_bwd(x, mean, rstd, gain, gy)


def softmax_fwd(x):
    if _ext is not None and _f32c(x):
        return _ext.softmax_fwd(x)
    return _numpy.softmax_fwd(x)


def softmax_bwd(y, gy):
    if _ext is not None and _f32c(y) and _f32c(gy):
        return _ext.softmax_bwd(y, gy)
    return _numpy.softmax_bwd(y, gy)


def cross_entropy_fwd(logits, targets, ignore_id):
    if _ext is not None and _f32c(logits):
        t = np.ascontiguousarray(targets, dtype=np.int64)
        return _ext.cross_entropy_fwd(logits, t, ignore_id)
    return _numpy.cross_entropy_fwd(logits, targets, ignore_id)


def cross_entropy_bwd(probs, targets, ignore_id, n_kept, gloss):
    if _ext is not None and _f32c(probs):
        t = np.ascontiguousarray(targets, dtype=np.int64)
        return _ext.cross_entropy_bwd(probs, t, ignore_id, n_kept, gloss)
    return _numpy.cross_entropy_bwd(probs, targets, ignore_id, n_kept, gloss)
