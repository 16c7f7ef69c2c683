"""Self-attention and the two ways of letting it see reference features.

* ``self_attention``: plain multi-head self-attention.
* ``rasa``: reference keys/values are concatenated into the self-attention
  softmax itself ("refer-attention in self-attention").
* ``drra``: the self-attention output is left untouched and a separate,
  lambda-scaled refer-attention branch is added residually. The branch has its
  own key/value transforms for the reference features and a zero-initialized
  output projection, so a fresh branch contributes exactly nothing.

All functions accept inputs of shape (..., n, d). Attention logits are scaled
by the square root of the per-head dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from refedit.layers import Module, init_weight, zeros
from refedit.nk import Rng, ShapeError, Tensor, ops


class AttentionParams(Module):
    """Q/K/V/output projections of one multi-head attention module."""

    def __init__(self, rng: Rng, dim, heads, kv_dim=None):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by head count {heads}")
        kv_dim = dim if kv_dim is None else kv_dim
        self._heads = heads
        self._dim = dim
        self.wq = init_weight(rng, dim, dim)
        self.wk = init_weight(rng, kv_dim, dim)
        self.wv = init_weight(rng, kv_dim, dim)
        self.wo = init_weight(rng, dim, dim)
        self.bo = zeros(dim)

    @property
    def heads(self):
        return self._heads

    @property
    def dim(self):
        return self._dim


class ReferBranchParams(Module):
    """Trainable pieces of a decoupled refer-attention branch.

    ``wk``/``wv`` transform the reference keys/values (identity at init, since
    the extractor shares the denoiser's feature space); ``wo``/``bo`` is the
    branch output projection, zero at init.
    """

    def __init__(self, dim):
        self.wk = Tensor(np.eye(dim), requires_grad=True)
        self.wv = Tensor(np.eye(dim), requires_grad=True)
        self.wo = zeros(dim, dim)
        self.bo = zeros(dim)


@dataclass
class ReferenceKV:
    """Keys/values tapped from one self-attention module of the extractor."""

    keys: Tensor
    values: Tensor
    block_index: int = 0

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise ShapeError(f"reference keys {self.keys.shape} and values {self.values.shape} differ")

    @property
    def length(self):
        return self.keys.shape[-2]


def split_heads(t, heads):
    *lead, n, d = t.shape
    t = t.reshape(tuple(lead) + (n, heads, d // heads))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return ops.transpose(t, axes)


def merge_heads(t):
    *lead, h, n, dh = t.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return ops.transpose(t, axes).reshape(tuple(lead) + (n, h * dh))


def attend(q, k, v, heads, key_bias=None):
    """Multi-head scaled dot-product attention on already-projected tensors.

    ``key_bias`` (broadcastable to (..., 1, 1, m)) is added to the logits; it is
    used to neutralize padding keys when variable-length contexts are batched.
    """
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    logits = ops.matmul(qh, ops.swapaxes(kh, -1, -2)) * scale
    if key_bias is not None:
        logits = logits + key_bias
    weights = ops.softmax(logits, axis=-1)
    return merge_heads(ops.matmul(weights, vh))


def _check(x, p):
    if x.shape[-1] != p.dim:
        raise ShapeError(f"input feature dim {x.shape[-1]} != attention dim {p.dim}")


def project_qkv(x, p):
    _check(x, p)
    return ops.linear(x, p.wq), ops.linear(x, p.wk), ops.linear(x, p.wv)


def self_attention(x, p: AttentionParams, qkv=None, key_bias=None):
    q, k, v = qkv if qkv is not None else project_qkv(x, p)
    return ops.linear(attend(q, k, v, p.heads, key_bias), p.wo, p.bo)


def _ref_bias(n_self, ref, bias, like):
    if bias is None:
        return None
    b = np.zeros(n_self + ref.length, dtype=like.dtype)
    b[n_self:] = bias
    return b


def _check_ref(ref, p):
    if ref.keys.shape[-1] != p.dim:
        raise ShapeError(f"reference feature dim {ref.keys.shape[-1]} != attention dim {p.dim}")


def rasa(x, ref: ReferenceKV, p: AttentionParams, qkv=None, ref_keys=None, ref_values=None, ref_bias=None):
    """Self-attention whose softmax also covers the reference keys/values.

    ``ref_bias`` adds a constant to every reference logit (tests use a large
    negative value to switch the reference off smoothly).
    """
    _check_ref(ref, p)
    q, k, v = qkv if qkv is not None else project_qkv(x, p)
    kr = ref.keys if ref_keys is None else ref_keys
    vr = ref.values if ref_values is None else ref_values
    keys = ops.concat([k, kr], axis=-2)
    values = ops.concat([v, vr], axis=-2)
    bias = _ref_bias(k.shape[-2], ref, ref_bias, x)
    return ops.linear(attend(q, keys, values, p.heads, bias), p.wo, p.bo)


def refer_branch(x, ref: ReferenceKV, p: AttentionParams, branch: ReferBranchParams, qkv=None):
    """Second term of the decoupled residual output (before lambda scaling)."""
    _check_ref(ref, p)
    q, k, v = qkv if qkv is not None else project_qkv(x, p)
    kr = ops.linear(ref.keys, branch.wk)
    vr = ops.linear(ref.values, branch.wv)
    keys = ops.concat([k, kr], axis=-2)
    values = ops.concat([v, vr], axis=-2)
    return ops.linear(attend(q, keys, values, p.heads), branch.wo, branch.bo)


def _lambda_factor(lam, like):
    lam = np.asarray(lam, dtype=like.dtype)
    if lam.ndim == 0:
        return lam
    # Per-item lambda for batched input (b, n, d).
    return lam.reshape((-1,) + (1,) * (like.ndim - 1))


def drra(x, ref: ReferenceKV | None, lam, p: AttentionParams, branch: ReferBranchParams, qkv=None):
    """Self-attention plus a lambda-scaled, decoupled refer-attention residual."""
    q, k, v = qkv if qkv is not None else project_qkv(x, p)
    out = self_attention(x, p, qkv=(q, k, v))
    if ref is None:
        return out
    lam_arr = _lambda_factor(lam, x.data)
    if not np.any(lam_arr):
        return out
    return out + ops.mul(refer_branch(x, ref, p, branch, qkv=(q, k, v)), lam_arr)


def cross_attention(x, context, p: AttentionParams, key_bias=None):
    """Queries from ``x``, keys/values from ``context`` (e.g. instruction tokens)."""
    _check(x, p)
    q = ops.linear(x, p.wq)
    k = ops.linear(context, p.wk)
    v = ops.linear(context, p.wv)
    return ops.linear(attend(q, k, v, p.heads, key_bias), p.wo, p.bo)
