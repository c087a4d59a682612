"""Kernel backend selection.

The compiled extension is used when it imports; set ``CDSRNP_BACKEND=python``
to force the numpy fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("CDSRNP_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _kernels_py


def masked_softmax_forward(scores, mask):
    s = np.ascontiguousarray(scores, dtype=np.float64)
    m = np.ascontiguousarray(mask, dtype=np.bool_)
    shape = s.shape
    out = _impl.masked_softmax_forward(s.reshape(-1, shape[-1]), m.reshape(-1, shape[-1]))
    return np.asarray(out).reshape(shape)


def masked_softmax_backward(y, g):
    y = np.ascontiguousarray(y, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    shape = y.shape
    out = _impl.masked_softmax_backward(y.reshape(-1, shape[-1]), g.reshape(-1, shape[-1]))
    return np.asarray(out).reshape(shape)


def scatter_add_rows(target, idx, src, skip_zero=False):
    """In-place ``target[idx] += src`` over rows of a 2-D ``target``."""
    idx = np.ascontiguousarray(idx, dtype=np.int64).reshape(-1)
    src = np.ascontiguousarray(src, dtype=np.float64).reshape(idx.shape[0], -1)
    _impl.scatter_add_rows(target, idx, src, bool(skip_zero))
