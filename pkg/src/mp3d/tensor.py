"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (float32 by default, float64 for the
shadow verification mode used by the gradient test suite). Every op records
a backward closure on its output; ``Tensor.backward()`` runs the tape in
reverse topological order. The operator set is deliberately closed and
small: exactly what the detector needs, no general broadcasting.
"""
from __future__ import annotations

import numpy as np

# When enabled, every op asserts its output is finite. Cheap insurance for
# the test suite; off by default in library use.
CHECK_FINITE = False

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph construction ------------------------------------------------
    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate ``grad`` on every requires_grad leaf reachable from self.

        Only defined for scalar tensors (the loss).
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar tensor, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _result(data, parents, backward_fn):
    """Wrap an op result, wiring the tape only if some parent needs grad."""
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values in op output")
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


# -- elementwise ops -------------------------------------------------------

def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _result(x.data * mask, (x,), bwd)


def sigmoid(x):
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * s * (1.0 - s))

    return _result(s, (x,), bwd)


def add(x, y):
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"add: shape mismatch {x.shape} vs {y.shape}")

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g)
        if y.requires_grad:
            y._accumulate(g)

    return _result(x.data + y.data, (x, y), bwd)


def mul(x, y):
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"mul: shape mismatch {x.shape} vs {y.shape}")

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * y.data)
        if y.requires_grad:
            y._accumulate(g * x.data)

    return _result(x.data * y.data, (x, y), bwd)


def mul_scalar(x, s):
    x = _as_tensor(x)
    s = float(s)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * s)

    return _result(x.data * s, (x,), bwd)


def tsum(x):
    """Sum of all elements, as a scalar tensor."""
    x = _as_tensor(x)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, g))

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bwd)


# -- structural ops --------------------------------------------------------

def reshape(x, shape):
    x = _as_tensor(x)
    old_shape = x.shape

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g.reshape(old_shape))

    return _result(np.ascontiguousarray(x.data.reshape(shape)), (x,), bwd)


def transpose(x, axes):
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.ascontiguousarray(g.transpose(inv)))

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), bwd)


def take(x, indices, axis=0):
    """Select rows along ``axis``; backward scatter-adds into the source."""
    x = _as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (slice(None),) * axis + (indices,), g)
            x._accumulate(gx)

    return _result(np.ascontiguousarray(np.take(x.data, indices, axis=axis)), (x,), bwd)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = (slice(None),) * axis + (slice(lo, hi),)
                t._accumulate(g[sl])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)
