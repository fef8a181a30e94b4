"""Dense numpy-backed tensors with reverse-mode differentiation.

Every operation records its parents and a closure mapping the output gradient
to parent gradients. :meth:`Tensor.backward` replays those closures in reverse
topological order; leaf tensors accumulate into ``.grad`` so repeated backward
passes add up until :func:`zero_grad` is called.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from numbers import Number

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ContractError, NumericalError, ShapeError

DEBUG = bool(os.environ.get("BAYESCNN_DEBUG"))

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, parameter updates)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled():
    return _grad_enabled


def _as_array(data, dtype=None):
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-dimensional float array that can take part in a gradient graph.

    Parameters
    ----------
    data : array_like
        Values; non-float input is converted to float64.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad`` for this tensor.
    dtype : numpy dtype, optional
        Force a storage precision (float64 in tests, float32 for training).
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = ""

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def zero_grad(self):
        self.grad = None

    # -- graph -------------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                g = np.array(g, dtype=node.data.dtype, copy=True)
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic --------------------------------------------------------
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
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _make(data, parents, backward, op):
    out = Tensor(data)
    if DEBUG and all(np.all(np.isfinite(p.data)) for p in parents):
        if not np.all(np.isfinite(out.data)):
            raise NumericalError(f"{op} produced non-finite values from finite inputs")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


def backward(root):
    root.backward()


# -- elementwise --------------------------------------------------------------


def add(a, b):
    if isinstance(b, Number):
        return _make(a.data + b, (a,), lambda g: (g,), "add")
    if isinstance(a, Number):
        return add(b, a)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b):
    if isinstance(b, Number):
        return _make(a.data - b, (a,), lambda g: (g,), "sub")
    if isinstance(a, Number):
        return _make(a - b.data, (b,), lambda g: (-g,), "rsub")
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b):
    if isinstance(b, Number):
        return _make(a.data * b, (a,), lambda g: (g * b,), "mul")
    if isinstance(a, Number):
        return mul(b, a)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b):
    if isinstance(b, Number):
        return _make(a.data / b, (a,), lambda g: (g / b,), "div")
    if isinstance(a, Number):
        bd = b.data
        out = a / bd
        return _make(out, (b,), lambda g: (-g * out / bd,), "rdiv")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def power(a, exponent):
    if not isinstance(exponent, Number):
        raise ContractError("power() supports scalar exponents only")
    x = a.data
    return _make(x**exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1),), "pow")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp_min(a, floor):
    """``max(a, floor)``; no gradient flows where the floor is active."""
    x = a.data
    return _make(np.maximum(x, floor), (a,), lambda g: (g * (x > floor),), "clamp_min")


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def softplus(x, beta=1.0):
    """``(1/beta) log(1 + exp(beta x))`` evaluated without overflow.

    Strictly positive for every finite input; the derivative is
    ``sigmoid(beta x)``.
    """
    if beta <= 0:
        raise ContractError(f"softplus beta must be positive, got {beta}")
    z = x.data
    out = np.maximum(z, 0) + np.log1p(np.exp(-beta * np.abs(z))) / beta
    return _make(out, (x,), lambda g: (g * _sigmoid(beta * z),), "softplus")


# -- shape and reduction --------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) / count


def reshape(a, shape):
    original = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),), "reshape")


def flatten(a):
    """Collapse all but the leading (batch) dimension."""
    return reshape(a, (a.shape[0], -1))


def take(a, index):
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward, "getitem")


# -- linear algebra -------------------------------------------------------------


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def affine(x, weight, bias):
    """``x @ weight + bias`` for ``x`` of shape (N, D_in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data

    def backward(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(xd @ wd + bias.data, (x, weight, bias), backward, "affine")


def _out_size(size, k, stride, padding=0):
    return (size + 2 * padding - k) // stride + 1


def _scatter_windows(target, patches, k, stride, out_h, out_w):
    """Add ``patches`` (N, C, H', W', k, k) back onto ``target`` (col2im)."""
    for i in range(k):
        for j in range(k):
            target[
                :,
                :,
                i : i + stride * (out_h - 1) + 1 : stride,
                j : j + stride * (out_w - 1) + 1 : stride,
            ] += patches[..., i, j]


def conv2d(input, weight, stride=1, padding=0):
    """2-D cross-correlation (no kernel flip) with zero padding.

    ``input`` is (N, C_in, H, W), ``weight`` is (C_out, C_in, k, k).
    Implemented as patch-matrix expansion followed by one matrix product.
    """
    if input.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {input.shape} and {weight.shape}")
    n, c_in, h, w = input.shape
    c_out, c_w, k, k2 = weight.shape
    if c_w != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {input.shape} vs weight {weight.shape}")
    if k != k2:
        raise ShapeError(f"conv2d needs square kernels, got {weight.shape}")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"kernel {k} larger than padded input {input.shape} (padding {padding})")

    x = input.data
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = _out_size(h, k, stride, padding)
    out_w = _out_size(w, k, stride, padding)
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N*H'*W', C_in*k*k) patch matrix, kept for the weight gradient
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c_in * k * k)
    wmat = weight.data.reshape(c_out, -1)
    out = (cols @ wmat.T).reshape(n, out_h, out_w, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    padded_shape = x.shape

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if input.requires_grad:
            dcols = (g2 @ wmat).reshape(n, out_h, out_w, c_in, k, k).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros(padded_shape, dtype=g.dtype)
            _scatter_windows(gxp, dcols, k, stride, out_h, out_w)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw

    return _make(out, (input, weight), backward, "conv2d")


def maxpool2d(input, k, stride=None):
    """Max over k x k windows (floor mode).

    The gradient goes to the first maximal element of each window in
    row-major order.
    """
    stride = k if stride is None else stride
    if input.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-D input, got {input.shape}")
    n, c, h, w = input.shape
    if k > h or k > w:
        raise ShapeError(f"pool window {k} larger than input {input.shape}")
    out_h, out_w = _out_size(h, k, stride), _out_size(w, k, stride)
    windows = sliding_window_view(input.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, out_h, out_w, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    shape = input.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gx[
                    :,
                    :,
                    i : i + stride * (out_h - 1) + 1 : stride,
                    j : j + stride * (out_w - 1) + 1 : stride,
                ] += g * (arg == i * k + j)
        return (gx,)

    return _make(out, (input,), backward, "maxpool2d")
