"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Every op returns a new :class:`Tensor` holding references to its parents and a
closure mapping the output gradient to one gradient per parent. The graph is
rebuilt on each forward pass.
"""
import builtins
import contextlib
import struct
from collections.abc import Mapping

import numpy as np

from . import kernels

FORMAT_VERSION = 1
_MAGIC = b"CDSRNPPS"


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; results are plain constants."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        extra = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{extra})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self):
        return float(self.data)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / c)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _check_suffix(a, b, op):
    # b may broadcast against a only when its shape is a trailing suffix of a's
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_suffix(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _check_suffix(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_suffix(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def scale(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a):
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a):
    x = a.data
    ex = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a):
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a):
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a):
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    r = np.sqrt(a.data)
    return _make(r, (a,), lambda g: (g * 0.5 / r,))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; no gradient flows where the clamp is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu,
                "sigmoid": sigmoid, "exp": exp, "log": log}


def elementwise(op, *operands):
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------- structural

def matmul(a, b):
    """Matrix product; ``a`` may carry leading batch axes, ``b`` is 2-D or
    carries the same batch axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def transpose(a, axes=None):
    axes = tuple(range(a.data.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a):
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=-1):
    tensors = [_lift(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        s0, s1 = tensors[0].shape, t.shape
        if len(s1) != ndim or s0[:ax] + s0[ax + 1:] != s1[:ax] + s1[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {s0} and {s1} on axis {axis}")
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    data = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(data, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=ax)))


def split(a, sizes, axis=-1):
    ax = axis % a.data.ndim
    if builtins.sum(sizes) != a.shape[ax]:
        raise ShapeError(f"split: sizes {sizes} do not cover axis of length {a.shape[ax]}")
    out, start = [], 0
    for n in sizes:
        sl = [slice(None)] * a.data.ndim
        sl[ax] = slice(start, start + n)
        out.append(_slice(a, tuple(sl)))
        start += n
    return out


def _slice(a, sl):
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[sl] = g
        return (full,)

    return _make(a.data[sl], (a,), bw)


def sum_of_squares(tensors):
    """Scalar sum of squares over all elements of several tensors."""
    tensors = list(tensors)
    total = builtins.sum(float(np.vdot(t.data, t.data)) for t in tensors)
    return _make(np.array(total), tuple(tensors),
                 lambda g: tuple(2.0 * g * t.data for t in tensors))


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    if axis is None:
        return _make(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.data.ndim
    return _make(a.data.sum(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(a, axis=-1):
    ax = axis % a.data.ndim
    n = a.shape[ax]
    if n == 0:
        raise ShapeError("mean over a zero-length axis")
    shape = a.shape
    return _make(a.data.mean(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),))


def masked_softmax(scores, mask):
    """Softmax over the last axis; ``mask`` True marks attendable entries.
    Rows with nothing attendable come out as all zeros."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        mask = np.broadcast_to(mask, scores.shape)
    y = kernels.masked_softmax_forward(scores.data, mask)
    return _make(y, (scores,), lambda g: (kernels.masked_softmax_backward(y, g),))


def softmax(scores):
    return masked_softmax(scores, np.ones(scores.shape, dtype=bool))


def embedding(table, idx, padding_idx=0):
    """Row lookup ``table[idx]``; rows at ``padding_idx`` read as zeros and
    receive no gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    n_rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"embedding index out of range for table with {n_rows} rows")
    out = table.data[idx]
    if padding_idx is not None:
        out[idx == padding_idx] = 0.0
    d = table.shape[1]

    def bw(g):
        gt = np.zeros(table.shape)
        kernels.scatter_add_rows(gt, idx.reshape(-1), g.reshape(-1, d),
                                 skip_zero=padding_idx == 0)
        if padding_idx not in (None, 0):
            gt[padding_idx] = 0.0
        return (gt,)

    return _make(out, (table,), bw)


def take_rows(a, idx):
    """``a[idx]`` along axis 0 with scatter-add backward."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def bw(g):
        gt = np.zeros((shape[0], int(np.prod(shape[1:], dtype=np.int64))))
        kernels.scatter_add_rows(gt, idx.reshape(-1), g.reshape(idx.size, -1))
        return (gt.reshape(shape),)

    return _make(a.data[idx], (a,), bw)


# ---------------------------------------------------------------- backward

def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor
    with ``requires_grad``."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------- parameters

class ParameterStore(Mapping):
    """Named learnable tensors, iterated in lexicographic name order."""

    def __init__(self, params=None):
        self._params = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __iter__(self):
        return iter(sorted(self._params))

    def __len__(self):
        return len(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def num_values(self):
        return int(np.sum([t.data.size for t in self._params.values()]))

    def copy(self):
        return ParameterStore({k: self._params[k].data.copy() for k in self})

    def to_bytes(self):
        chunks = [_MAGIC, struct.pack("<II", FORMAT_VERSION, len(self))]
        for name in self:
            arr = self._params[name].data
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(raw)) + raw)
            chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, buf):
        buf = memoryview(buf)
        if bytes(buf[:8]) != _MAGIC:
            raise ValueError("not a parameter store container")
        version, count = struct.unpack_from("<II", buf, 8)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported parameter store version {version}")
        pos, params = 16, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = bytes(buf[pos:pos + n]).decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            params[name] = arr.astype(np.float64)
        return cls(params)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
