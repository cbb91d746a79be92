"""Special functions and numerically stable nonlinearities.

``lgamma``, ``digamma`` and ``trigamma`` run on a compiled kernel when the
``ptsr._kernels`` extension is importable and fall back to a numpy
implementation of the same algorithm otherwise. Set ``PTSR_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` reports which one was selected.
"""

import os

import numpy as np

from ptsr import _kernels_py
from ptsr.errors import DomainError

if os.environ.get("PTSR_PURE_PYTHON"):
    _kernels = _kernels_py
    BACKEND = "python"
else:
    try:
        from ptsr import _kernels
        BACKEND = "compiled"
    except ImportError:  # extension not built
        _kernels = _kernels_py
        BACKEND = "python"


def _apply(kernel, x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or not np.all(arr > 0):
        raise DomainError(f"{name} requires finite, strictly positive input")
    flat = np.ascontiguousarray(arr).reshape(-1)
    out = np.empty_like(flat)
    kernel(flat, out)
    if arr.ndim == 0:
        return float(out[0])
    return out.reshape(arr.shape)


def lgamma(x):
    """ln Gamma(x) for x > 0; scalar in, float out; array in, array out."""
    return _apply(_kernels.lgamma, x, "lgamma")


def digamma(x):
    return _apply(_kernels.digamma, x, "digamma")


def trigamma(x):
    return _apply(_kernels.trigamma, x, "trigamma")


def softmax(v, axis=-1, mask=None):
    """Max-shifted softmax along ``axis``.

    ``mask`` (broadcastable boolean, True = keep) removes entries from the
    normalisation; masked entries come back as exactly 0 and a slice with
    nothing kept is all zeros.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise DomainError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise DomainError("softmax requires finite input")
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        v = np.where(keep, v, -np.inf)
    top = np.max(v, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(v - top)
    total = np.sum(e, axis=axis, keepdims=True)
    return e / np.where(total > 0, total, 1.0)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return float(out) if out.ndim == 0 else out


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return float(out) if out.ndim == 0 else out


def log_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return float(out) if out.ndim == 0 else out
