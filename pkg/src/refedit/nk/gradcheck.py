"""Central finite-difference gradient verification."""

from __future__ import annotations

import numpy as np

from refedit.nk.tensor import Tensor, precision


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x.data``."""
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def analytic_grad(f, x):
    x.zero_grad()
    loss = f()
    loss.backward()
    g = x._grad
    return np.zeros(x.shape) if g is None else g.copy()


def finite_diff_check(f, x, h=1e-5, wrt=None):
    """Max relative error between backprop and central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor that depends
    on ``x`` (and optionally the tensors in ``wrt``, which are checked too).
    Run under ``precision(np.float64)``; ``x`` must be a float64 leaf.
    """
    targets = [x] + list(wrt or [])
    worst = 0.0
    with precision(np.float64):
        for t in targets:
            if t.dtype != np.float64:
                raise TypeError("finite_diff_check needs float64 tensors")
            t.requires_grad = True
        for t in targets:
            for o in targets:
                o.zero_grad()
            a = analytic_grad(f, t)
            n = numeric_grad(f, t, h)
            worst = max(worst, relative_error(a, n))
    return worst


def check_scalar_fn(fn, *inputs, h=1e-5):
    """Convenience: gradcheck ``fn(*tensors)`` over every input array."""
    with precision(np.float64):
        tensors = [Tensor(np.array(v, dtype=np.float64), requires_grad=True) for v in inputs]
        return finite_diff_check(lambda: fn(*tensors), tensors[0], h=h, wrt=tensors[1:])
