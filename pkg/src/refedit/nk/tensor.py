"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their parents and a backward closure; :meth:`Tensor.backward`
walks that graph in reverse topological order and accumulates gradients into
the ``grad`` field of every leaf tensor with ``requires_grad=True``.

Gradients accumulate across repeated ``backward`` calls until
:meth:`Tensor.zero_grad` is called, mirroring the usual autograd convention.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

_state = threading.local()


def _cfg():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.grad_enabled = True
    return _state


def default_dtype():
    return _cfg().dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used when tensors are created.

    ``precision(np.float64)`` is the mode used by gradient checks.
    """
    cfg = _cfg()
    prev = cfg.dtype
    cfg.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        cfg.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference and frozen feature extraction)."""
    cfg = _cfg()
    prev = cfg.grad_enabled
    cfg.grad_enabled = False
    try:
        yield
    finally:
        cfg.grad_enabled = prev


def grad_enabled():
    return _cfg().grad_enabled


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "name", "__weakref__")

    # Make numpy defer to Tensor's reflected operators.
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0 or arr.flags.c_contiguous:
            self.data = arr
        else:
            self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data, parents, backward):
        """Build an op result, recording the graph only when needed."""
        out = cls.__new__(cls)
        out.data = data
        out._grad = None
        out.name = None
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def grad(self):
        """Accumulated gradient as a Tensor (same shape), or None."""
        if self._grad is None:
            return None
        return Tensor(self._grad, dtype=self._grad.dtype)

    @grad.setter
    def grad(self, value):
        if value is None:
            self._grad = None
            return
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if arr.shape != self.data.shape:
            raise ShapeError(f"grad shape {arr.shape} does not match tensor shape {self.data.shape}")
        self._grad = np.array(arr, dtype=self.data.dtype)

    def zero_grad(self):
        self._grad = None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- autodiff -------------------------------------------------------------
    def backward(self, grad=None):
        """Populate ``grad`` on every reachable leaf that requires gradients.

        ``grad`` defaults to ones for scalar tensors; non-scalar roots need an
        explicit seed gradient.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() on a non-scalar tensor of shape {self.shape} needs an explicit gradient"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad.data if isinstance(grad, Tensor) else grad, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(f"seed gradient shape {seed.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topo_order(self)
        grads = {id(self): seed}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if node._grad is None:
                        node._grad = np.array(g, dtype=node.data.dtype)
                    else:
                        node._grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                if prev is None:
                    grads[key] = pg
                else:
                    grads[key] = prev + pg

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        from refedit.nk import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from refedit.nk import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from refedit.nk import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from refedit.nk import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from refedit.nk import ops

        return ops.div(self, other)

    def __neg__(self):
        from refedit.nk import ops

        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from refedit.nk import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from refedit.nk import ops

        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from refedit.nk import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from refedit.nk import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from refedit.nk import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from refedit.nk import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        from refedit.nk import ops

        return ops.swapaxes(self, -1, -2)


def _topo_order(root):
    """Reverse topological order (root first), iterative to avoid recursion limits."""
    visited = set()
    post = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    post.reverse()
    return post


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)
