"""Small reverse-mode autodiff tape over numpy arrays.

Tensors wrap ndarrays and record a backward closure per op. Gradients are
accumulated leaf-ward in reverse topological order, which is fixed by graph
construction order, so a backward pass is bit-deterministic regardless of
worker counts. Dtypes are preserved (float32 graphs stay float32; tests run
the same graphs in float64 for finite-difference checks).
"""

from __future__ import annotations

import numpy as np
from scipy import special as _special


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "_retain")

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._retain = False

    def retain_grad(self):
        self._retain = True
        return self

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(value, parents, backward):
        out = Tensor(value, requires_grad=True)
        out._parents = parents
        out._backward = backward
        return out

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def item(self):
        return float(self.value)

    def detach(self):
        return Tensor(self.value)

    # -- backward pass --------------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.value)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accum(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if not node._retain:
                    node.grad = None  # intermediate grads are transient

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


class Param(Tensor):
    """Leaf tensor that collects gradients."""

    __slots__ = ()

    def __init__(self, value):
        super().__init__(np.asarray(value), requires_grad=True)

    def zero_grad(self):
        self.grad = None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x, dtype=None):
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    """Sum g down to `shape` (the adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ----------------------------------------------------------------
# Python scalars are kept raw (weak promotion under NEP 50) so float32 graphs
# stay float32.


def _is_scalar(x):
    return isinstance(x, (int, float)) or (isinstance(x, np.generic) and x.ndim == 0)


def add(a, b):
    if _is_scalar(b) or _is_scalar(a):
        t, s = (a, b) if _is_scalar(b) else (b, a)
        t = as_tensor(t)
        val = t.value + s
        if not t.requires_grad:
            return Tensor(val)

        def bwd(g):
            t._accum(g)

        return Tensor._from_op(val, (t,), bwd)
    a, b = as_tensor(a), as_tensor(b)
    val = a.value + b.value
    if not (a.requires_grad or b.requires_grad):
        return Tensor(val)

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.value.shape))

    return Tensor._from_op(val, (a, b), bwd)


def sub(a, b):
    if _is_scalar(b):
        return add(a, -b)
    if _is_scalar(a):
        return add(mul(b, -1.0), a)
    a, b = as_tensor(a), as_tensor(b)
    val = a.value - b.value
    if not (a.requires_grad or b.requires_grad):
        return Tensor(val)

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.value.shape))

    return Tensor._from_op(val, (a, b), bwd)


def mul(a, b):
    if _is_scalar(b) or _is_scalar(a):
        t, s = (a, b) if _is_scalar(b) else (b, a)
        t = as_tensor(t)
        val = t.value * s
        if not t.requires_grad:
            return Tensor(val)

        def bwd(g):
            t._accum(g * s)

        return Tensor._from_op(val, (t,), bwd)
    a, b = as_tensor(a), as_tensor(b)
    val = a.value * b.value
    if not (a.requires_grad or b.requires_grad):
        return Tensor(val)
    av, bv = a.value, b.value

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * bv, av.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * av, bv.shape))

    return Tensor._from_op(val, (a, b), bwd)


def div(a, b):
    if _is_scalar(b):
        return mul(a, 1.0 / b)
    if _is_scalar(a):
        a = Tensor(np.asarray(a, dtype=as_tensor(b).value.dtype))
    a, b = as_tensor(a), as_tensor(b)
    val = a.value / b.value
    if not (a.requires_grad or b.requires_grad):
        return Tensor(val)
    av, bv = a.value, b.value

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / bv, av.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * av / (bv * bv), bv.shape))

    return Tensor._from_op(val, (a, b), bwd)


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    val = a.value ** p
    if not a.requires_grad:
        return Tensor(val)
    av = a.value

    def bwd(g):
        a._accum(g * p * av ** (p - 1.0))

    return Tensor._from_op(val, (a,), bwd)


# -- elementwise ----------------------------------------------------------------


def _unary(a, val, dval):
    if not a.requires_grad:
        return Tensor(val)

    def bwd(g):
        a._accum(g * dval)

    return Tensor._from_op(val, (a,), bwd)


def exp(a):
    a = as_tensor(a)
    v = np.exp(a.value)
    return _unary(a, v, v)


def log(a):
    a = as_tensor(a)
    return _unary(a, np.log(a.value), 1.0 / a.value)


def sqrt(a):
    a = as_tensor(a)
    v = np.sqrt(a.value)
    return _unary(a, v, 0.5 / v)


def sin(a):
    a = as_tensor(a)
    return _unary(a, np.sin(a.value), np.cos(a.value))


def cos(a):
    a = as_tensor(a)
    return _unary(a, np.cos(a.value), -np.sin(a.value))


def erf(a):
    a = as_tensor(a)
    v = _special.erf(a.value)
    d = (2.0 / np.sqrt(np.pi)) * np.exp(-a.value * a.value)
    return _unary(a, v, d)


def absolute(a):
    # subgradient 0 at the kink
    a = as_tensor(a)
    return _unary(a, np.abs(a.value), np.sign(a.value))


def sigmoid(a):
    a = as_tensor(a)
    v = 1.0 / (1.0 + np.exp(-a.value))
    return _unary(a, v, v * (1.0 - v))


def gelu(a):
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.value
    phi = 0.5 * (1.0 + _special.erf(x / np.sqrt(2.0)))
    v = x * phi
    d = phi + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _unary(a, v, d)


def _pair_coerce(a, b):
    a = as_tensor(a)
    if _is_scalar(b):
        b = Tensor(np.asarray(b, dtype=a.value.dtype))
    return a, as_tensor(b)


def maximum(a, b):
    a, b = _pair_coerce(a, b)
    mask = a.value >= b.value  # ties route to the first argument
    val = np.where(mask, a.value, b.value)
    if not (a.requires_grad or b.requires_grad):
        return Tensor(val)

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * mask, a.value.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * ~mask, b.value.shape))

    return Tensor._from_op(val, (a, b), bwd)


def minimum(a, b):
    a, b = _pair_coerce(a, b)
    mask = a.value <= b.value
    val = np.where(mask, a.value, b.value)
    if not (a.requires_grad or b.requires_grad):
        return Tensor(val)

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * mask, a.value.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * ~mask, b.value.shape))

    return Tensor._from_op(val, (a, b), bwd)


def where(mask, a, b):
    """Select with a non-differentiable boolean mask."""
    if _is_scalar(b) and not _is_scalar(a):
        a, b = _pair_coerce(a, b)
    elif _is_scalar(a) and not _is_scalar(b):
        b, a = _pair_coerce(b, a)
    else:
        a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    val = np.where(mask, a.value, b.value)
    if not (a.requires_grad or b.requires_grad):
        return Tensor(val)

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * mask, a.value.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * ~mask, b.value.shape))

    return Tensor._from_op(val, (a, b), bwd)


# -- linear algebra / reductions -------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    val = a.value @ b.value
    if not (a.requires_grad or b.requires_grad):
        return Tensor(val)
    av, bv = a.value, b.value

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ bv.swapaxes(-1, -2), av.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(av.swapaxes(-1, -2) @ g, bv.shape))

    return Tensor._from_op(val, (a, b), bwd)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    val = a.value.sum(axis=axis, keepdims=keepdims)
    if not a.requires_grad:
        return Tensor(val)
    shape = a.value.shape

    def bwd(g):
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, ax)
        a._accum(np.broadcast_to(g, shape))

    return Tensor._from_op(val, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod(
        [a.value.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(a, shape):
    a = as_tensor(a)
    val = a.value.reshape(shape)
    if not a.requires_grad:
        return Tensor(val)
    orig = a.value.shape

    def bwd(g):
        a._accum(g.reshape(orig))

    return Tensor._from_op(val, (a,), bwd)


def transpose(a, axes=None):
    a = as_tensor(a)
    val = a.value.transpose(axes)
    if not a.requires_grad:
        return Tensor(val)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        a._accum(g.transpose(inv))

    return Tensor._from_op(val, (a,), bwd)


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    val = a.value.swapaxes(ax1, ax2)
    if not a.requires_grad:
        return Tensor(val)

    def bwd(g):
        a._accum(g.swapaxes(ax1, ax2))

    return Tensor._from_op(val, (a,), bwd)


def take(a, idx):
    """Indexing/gather; scatter-adds on the way back (handles repeated rows)."""
    a = as_tensor(a)
    val = a.value[idx]
    if not a.requires_grad:
        return Tensor(val)
    shape = a.value.shape
    dtype = a.value.dtype
    # 1-D integer row gathers are the hot path; bincount beats np.add.at there
    fast_rows = (isinstance(idx, np.ndarray) and idx.ndim == 1
                 and idx.dtype.kind in "iu")

    def bwd(g):
        if fast_rows:
            inner = int(np.prod(shape[1:], dtype=np.int64)) if len(shape) > 1 else 1
            lin = idx * inner
            if inner > 1:
                lin = (lin[:, None] + np.arange(inner)).ravel()
            buf = np.bincount(lin, weights=g.ravel().astype(np.float64),
                              minlength=shape[0] * inner)
            a._accum(buf.reshape(shape).astype(dtype))
        else:
            buf = np.zeros(shape, dtype=dtype)
            np.add.at(buf, idx, g)
            a._accum(buf)

    return Tensor._from_op(val, (a,), bwd)


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    val = np.concatenate([t.value for t in tensors], axis=axis)
    if not any(t.requires_grad for t in tensors):
        return Tensor(val)
    sizes = np.cumsum([t.value.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return Tensor._from_op(val, tuple(tensors), bwd)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    val = np.stack([t.value for t in tensors], axis=axis)
    if not any(t.requires_grad for t in tensors):
        return Tensor(val)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return Tensor._from_op(val, tuple(tensors), bwd)


# -- composed helpers -------------------------------------------------------------


def sq_norm(a, axis=-1, keepdims=False):
    return tsum(a * a, axis=axis, keepdims=keepdims)


def norm(a, axis=-1, keepdims=False):
    return sqrt(sq_norm(a, axis=axis, keepdims=keepdims))


def normalize(a, axis=-1):
    return a / norm(a, axis=axis, keepdims=True)


def custom_op(value, parents, backward):
    """Install a handwritten backward; `backward(g)` must _accum into parents."""
    if not any(p.requires_grad for p in parents):
        return Tensor(value)
    return Tensor._from_op(value, tuple(parents), backward)
