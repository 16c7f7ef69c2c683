"""Differentiable operations on :class:`~refedit.nk.tensor.Tensor`.

Each op computes its forward value with numpy (or a fused kernel from
``refedit._kernels``) and registers a closure mapping the output gradient to
one gradient per parent. Broadcasting follows numpy; gradients are summed
back to each operand's shape.
"""

from __future__ import annotations

import numpy as np

from refedit import _kernels
from refedit.nk.tensor import ShapeError, Tensor, as_tensor


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def add(a, b):
    a = as_tensor(a)
    b = _lift(b, a)
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(out, (a, b), backward)


def sub(a, b):
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        a = _lift(a, b)
    a = as_tensor(a)
    b = _lift(b, a)
    out = a.data - b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._make(out, (a, b), backward)


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        # Scalar / constant array: single-parent node keeps graphs small.
        c = np.asarray(b, dtype=a.dtype)
        out = a.data * c
        sa = a.shape

        def backward_c(g):
            return (_unbroadcast(g * c, sa),)

        return Tensor._make(out, (a,), backward_c)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._make(out, (a, b), backward)


def div(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / np.asarray(b, dtype=a.dtype))
    out = a.data / b.data
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return Tensor._make(out, (a, b), backward)


def matmul(a, b):
    """Matrix product over the last two axes, with batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch shapes incompatible: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return Tensor._make(out, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight (+ bias)`` with ``weight`` of shape (in, out).

    Leading axes of ``x`` are folded into one matrix so the weight gradient
    is a single GEMM.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {weight.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (wd.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],)) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._make(out, parents, backward)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return Tensor._make(out, (x,), backward)


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return Tensor._make(out, (x,), backward)


def swapaxes(x, a1, a2):
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._make(out, tuple(tensors), backward)


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x, index):
    x = as_tensor(x)
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    out = np.ascontiguousarray(out)
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._make(out, (x,), backward)


def embedding(table, ids):
    """Row lookup ``table[ids]``; gradient scatters back with accumulation."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return Tensor._make(out, (table,), backward)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return Tensor._make(out, (x,), backward)


def log(x):
    x = as_tensor(x)
    xd = x.data
    out = np.log(xd)

    def backward(g):
        return (g / xd,)

    return Tensor._make(out, (x,), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return Tensor._make(out, (x,), backward)


def _rows(arr):
    return np.ascontiguousarray(arr.reshape(-1, arr.shape[-1]))


def softmax(x, axis=-1):
    """Max-stabilized softmax along ``axis``."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    moved = axis != x.ndim - 1
    xd = np.moveaxis(x.data, axis, -1) if moved else x.data
    y = _kernels.softmax_fwd(_rows(xd)).reshape(xd.shape)
    out = np.ascontiguousarray(np.moveaxis(y, -1, axis)) if moved else y

    def backward(g):
        gm = np.moveaxis(g, axis, -1) if moved else g
        dx = _kernels.softmax_bwd(_rows(y), _rows(gm)).reshape(y.shape)
        return (np.moveaxis(dx, -1, axis) if moved else dx,)

    return Tensor._make(out, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Layer normalization over the last axis with affine ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs features {x.shape[-1]}")
    x2 = _rows(x.data)
    y, mu, rstd = _kernels.layernorm_fwd(x2, gamma.data, beta.data, eps)
    out = y.reshape(x.shape)
    gd = gamma.data

    def backward(g):
        dx, dg, db = _kernels.layernorm_bwd(_rows(g), x2, mu, rstd, gd)
        return dx.reshape(x.shape), dg, db

    return Tensor._make(out, (x, gamma, beta), backward)


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    x2 = _rows(x.data) if x.ndim >= 1 else x.data.reshape(1, 1)
    out = _kernels.gelu_fwd(x2).reshape(x.shape)

    def backward(g):
        return (_kernels.gelu_bwd(x2, _rows(g) if g.ndim >= 1 else g.reshape(1, 1)).reshape(x.shape),)

    return Tensor._make(out, (x,), backward)


def square(x):
    return mul(x, x)
