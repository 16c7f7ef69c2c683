"""Parameter containers and the small building blocks shared by every model part."""

from __future__ import annotations

import numpy as np

from refedit.nk import Rng, Tensor, ops


class Module:
    """Attribute-based parameter container.

    Leaf ``Tensor`` attributes, sub-``Module`` attributes, and lists of modules
    are discovered in assignment order, which fixes the checkpoint names.
    """

    def named_parameters(self, prefix=""):
        out = {}
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    out.update(sub.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def load_arrays(self, arrays, prefix=""):
        """Copy arrays (name -> ndarray) into this module's parameters in place."""
        for name, t in self.named_parameters(prefix).items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(arrays[name])
            if arr.shape != t.shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} != {t.shape}")
            t.data[...] = arr

    def set_requires_grad(self, flag):
        for t in self.parameters():
            t.requires_grad = flag
            if not flag:
                t.zero_grad()


def init_weight(rng, din, dout, scale=1.0):
    return Tensor(rng.normal((din, dout)) * (scale / np.sqrt(din)), requires_grad=True)


def zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape):
    return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: Rng, din, dout, bias=True, zero=False, scale=1.0):
        self.weight = zeros(din, dout) if zero else init_weight(rng, din, dout, scale)
        if bias:
            self.bias = zeros(dout)
        else:
            self._no_bias = True

    def __call__(self, x):
        return ops.linear(x, self.weight, getattr(self, "bias", None))


class LayerNorm(Module):
    def __init__(self, dim):
        self.gamma = ones(dim)
        self.beta = zeros(dim)

    def __call__(self, x):
        return ops.layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    def __init__(self, rng: Rng, dim, hidden):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))


def sinusoidal_embedding(t, dim, max_period=10000.0):
    """Integer timesteps (b,) -> (b, dim) sin/cos features."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    return emb
