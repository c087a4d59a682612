"""Pure-numpy implementations of the hot kernels.

Used when the compiled ``_kernels`` extension is unavailable, and as the
reference the compiled kernels are tested against.
"""
import numpy as np


def masked_softmax_forward(scores, mask):
    """Row-wise softmax of a 2-D array restricted to ``mask``.

    Masked entries are exactly 0; rows without any attendable entry are all 0.
    """
    neg = np.where(mask, scores, -np.inf)
    row_max = neg.max(axis=1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    ex = np.where(mask, np.exp(np.where(mask, scores, 0.0) - row_max), 0.0)
    denom = ex.sum(axis=1, keepdims=True)
    return ex / np.where(denom > 0.0, denom, 1.0)


def masked_softmax_backward(y, g):
    return y * (g - (y * g).sum(axis=1, keepdims=True))


def scatter_add_rows(target, idx, src, skip_zero):
    """target[idx[i]] += src[i], sequentially in i. Rows with idx 0 are
    dropped when ``skip_zero`` is set."""
    if skip_zero:
        keep = idx != 0
        idx = idx[keep]
        src = src[keep]
    np.add.at(target, idx, src)
