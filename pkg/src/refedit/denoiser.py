"""Patch-transformer editing denoiser and its frozen detail extractor.

The denoiser sees the noisy latent and the original-image latent stacked
into 8 channels, patchified into tokens. Each block runs self-attention
(optionally with a reference path), cross-attention to the instruction
embedding, and an FFN. The detail extractor is a frozen copy of the same
network whose per-block self-attention keys/values are tapped as reference
features.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from refedit import attention as A
from refedit.layers import FeedForward, LayerNorm, Linear, Module, sinusoidal_embedding
from refedit.nk import Rng, ShapeError, Tensor, no_grad, ops

LATENT_CHANNELS = 4


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    patch: int = 4
    dim: int = 128
    blocks: int = 4
    heads: int = 4
    ffn_mult: int = 4
    ctx_dim: int = 128

    @property
    def tokens(self):
        return (self.image_size // self.patch) ** 2

    @property
    def in_features(self):
        return 2 * LATENT_CHANNELS * self.patch * self.patch

    @property
    def out_features(self):
        return LATENT_CHANNELS * self.patch * self.patch


# -- latent codec -------------------------------------------------------------
def encode_latent(image, size=None):
    """uint8 RGB (H, W, 3) or (b, H, W, 3) -> latent (4, H, W) / (b, 4, H, W).

    RGB maps to [-1, 1]; the fourth channel is zero.
    """
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise TypeError(f"expected uint8 image, got {image.dtype}")
    if image.shape[-1] != 3 or image.ndim not in (3, 4):
        raise ShapeError(f"expected (..., H, W, 3) image, got {image.shape}")
    if size is not None and image.shape[-3:-1] != (size, size):
        raise ShapeError(f"image resolution {image.shape[-3:-1]} != ({size}, {size})")
    rgb = image.astype(np.float32) / np.float32(127.5) - np.float32(1.0)
    rgb = np.moveaxis(rgb, -1, -3)
    zero = np.zeros(rgb.shape[:-3] + (1,) + rgb.shape[-2:], dtype=np.float32)
    return np.concatenate([rgb, zero], axis=-3)


def decode_latent(latent):
    """Latent (4, H, W) / (b, 4, H, W) -> uint8 RGB; drops channel 4 and clamps."""
    latent = np.asarray(latent.data if isinstance(latent, Tensor) else latent, dtype=np.float32)
    rgb = np.clip(latent[..., :3, :, :], -1.0, 1.0)
    img = np.rint((rgb + np.float32(1.0)) * np.float32(127.5))
    return np.moveaxis(np.clip(img, 0, 255).astype(np.uint8), -3, -1)


def patchify(latent, patch):
    """(b, C, H, W) -> (b, (H/p)(W/p), C p p)."""
    b, c, h, w = latent.shape
    x = latent.reshape(b, c, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, (h // patch) * (w // patch), c * patch * patch))


def unpatchify(tokens, patch, channels, size):
    """Tensor (b, n, C p p) -> Tensor (b, C, H, W)."""
    b = tokens.shape[0]
    g = size // patch
    x = ops.reshape(tokens, (b, g, g, channels, patch, patch))
    x = ops.transpose(x, (0, 3, 1, 4, 2, 5))
    return ops.reshape(x, (b, channels, size, size))


# -- parameters ---------------------------------------------------------------
class DenoiserBlock(Module):
    def __init__(self, rng, cfg: DenoiserConfig):
        self.ln1 = LayerNorm(cfg.dim)
        self.attn = A.AttentionParams(rng, cfg.dim, cfg.heads)
        self.ln2 = LayerNorm(cfg.dim)
        self.cross = A.AttentionParams(rng, cfg.dim, cfg.heads, kv_dim=cfg.ctx_dim)
        self.ln3 = LayerNorm(cfg.dim)
        self.ffn = FeedForward(rng, cfg.dim, cfg.dim * cfg.ffn_mult)


class DrraParams(Module):
    """One refer branch per denoiser block."""

    def __init__(self, cfg: DenoiserConfig):
        self.blocks = [A.ReferBranchParams(cfg.dim) for _ in range(cfg.blocks)]


class Denoiser(Module):
    def __init__(self, rng: Rng, cfg: DenoiserConfig = DenoiserConfig()):
        self._cfg = cfg
        self.in_proj = Linear(rng, cfg.in_features, cfg.dim)
        self.pos = Tensor(rng.normal((cfg.tokens, cfg.dim)) * 0.02, requires_grad=True)
        self.time_fc1 = Linear(rng, cfg.dim, cfg.dim)
        self.time_fc2 = Linear(rng, cfg.dim, cfg.dim)
        self.blocks = [DenoiserBlock(rng, cfg) for _ in range(cfg.blocks)]
        self.ln_out = LayerNorm(cfg.dim)
        self.out_proj = Linear(rng, cfg.dim, cfg.out_features, zero=True)

    @property
    def config(self):
        return self._cfg


class ReferenceFeatures(list):
    """Block-aligned list of :class:`~refedit.attention.ReferenceKV`."""

    def select(self, index):
        """Features for a subset of batch items (index array over axis 0)."""
        return ReferenceFeatures(
            A.ReferenceKV(kv.keys[index], kv.values[index], kv.block_index) for kv in self
        )


@dataclass
class NoiseInputs:
    """Batched denoiser inputs. Latents are arrays (b, 4, H, W)."""

    x_t: np.ndarray
    x_o: np.ndarray
    context: Tensor
    t: np.ndarray
    context_bias: np.ndarray | None = None


def _tokens_in(net: Denoiser, x_t, x_o, t):
    cfg = net.config
    if x_t.shape != x_o.shape:
        raise ShapeError(f"x_t {x_t.shape} and x_o {x_o.shape} differ")
    if x_t.shape[1:] != (LATENT_CHANNELS, cfg.image_size, cfg.image_size):
        raise ShapeError(f"latent shape {x_t.shape[1:]} != (4, {cfg.image_size}, {cfg.image_size})")
    dtype = net.pos.dtype
    x = np.concatenate([x_t, x_o], axis=1).astype(dtype, copy=False)
    tokens = net.in_proj(Tensor(patchify(x, cfg.patch), dtype=dtype)) + net.pos
    temb = Tensor(sinusoidal_embedding(t, cfg.dim), dtype=dtype)
    temb = net.time_fc2(ops.gelu(net.time_fc1(temb)))
    return tokens + ops.reshape(temb, (temb.shape[0], 1, cfg.dim))


def _lambda_array(lam, b):
    arr = np.asarray(lam, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(b, float(arr))
    if arr.shape != (b,):
        raise ShapeError(f"lambda must be scalar or shape ({b},), got {arr.shape}")
    return arr


def denoiser_forward(
    net: Denoiser,
    inputs: NoiseInputs,
    f_ref: ReferenceFeatures | None = None,
    lam=1.0,
    drra: DrraParams | None = None,
    mode="drra",
):
    """Noise prediction (b, 4, H, W) as a Tensor.

    ``mode`` selects how reference features enter self-attention: ``"drra"``
    (decoupled residual branch scaled by ``lam``) or ``"rasa"`` (concatenated
    into the self-attention softmax; items with ``lam == 0`` are masked off).
    Without ``f_ref`` every block is plain self-attention.
    """
    cfg = net.config
    b = inputs.x_t.shape[0]
    if f_ref is not None and len(f_ref) != cfg.blocks:
        raise ShapeError(f"reference features have {len(f_ref)} blocks, denoiser has {cfg.blocks}")
    if f_ref is not None and drra is None:
        raise ValueError("reference features given but the model has no refer-attention parameters")
    lam_arr = _lambda_array(lam, b)
    use_ref = f_ref is not None and bool(np.any(lam_arr))
    x = _tokens_in(net, inputs.x_t, inputs.x_o, inputs.t)
    for i, blk in enumerate(net.blocks):
        h = blk.ln1(x)
        qkv = A.project_qkv(h, blk.attn)
        if not use_ref:
            sa = A.self_attention(h, blk.attn, qkv=qkv)
        elif mode == "drra":
            sa = A.drra(h, f_ref[i], lam_arr, blk.attn, drra.blocks[i], qkv=qkv)
        elif mode == "rasa":
            br = drra.blocks[i]
            kv = f_ref[i]
            n_self = qkv[1].shape[-2]
            bias = np.zeros((b, 1, 1, n_self + kv.length), dtype=x.dtype)
            bias[lam_arr == 0, ..., n_self:] = -1e9
            keys = ops.concat([qkv[1], ops.linear(kv.keys, br.wk)], axis=-2)
            values = ops.concat([qkv[2], ops.linear(kv.values, br.wv)], axis=-2)
            sa = ops.linear(A.attend(qkv[0], keys, values, blk.attn.heads, bias), blk.attn.wo, blk.attn.bo)
        else:
            raise ValueError(f"unknown reference mode {mode!r}")
        x = x + sa
        x = x + A.cross_attention(blk.ln2(x), inputs.context, blk.cross, inputs.context_bias)
        x = x + blk.ffn(blk.ln3(x))
    out = net.out_proj(net.ln_out(x))
    return unpatchify(out, cfg.patch, LATENT_CHANNELS, cfg.image_size)


# -- detail extractor ---------------------------------------------------------
class Extractor(Module):
    """Frozen denoiser snapshot plus the null instruction embedding it runs with."""

    def __init__(self, net: Denoiser, null_context: Tensor):
        self.net = net
        self.null_context = null_context
        self.set_requires_grad(False)

    @property
    def config(self):
        return self.net.config


def snapshot_to_extractor(net: Denoiser, null_context: Tensor):
    """Deep copy of the denoiser weights, frozen. Refer branches are not copied
    (they live outside ``Denoiser``)."""
    twin = copy.deepcopy(net)
    ctx = Tensor(np.array(null_context.data), dtype=null_context.dtype)
    return Extractor(twin, ctx)


def extract_reference_features(ref_images, extractor: Extractor):
    """Per-block self-attention keys/values of the extractor on clean references.

    Input is ``concat(encode(ref), zeros)`` at t=0 with the null instruction.
    Accepts (H, W, 3) or (b, H, W, 3) uint8 images; always returns batched
    features (b, tokens, d).
    """
    ref_images = np.asarray(ref_images)
    if ref_images.ndim == 3:
        ref_images = ref_images[None]
    net = extractor.net
    cfg = net.config
    lat = encode_latent(ref_images, cfg.image_size)
    b = lat.shape[0]
    feats = ReferenceFeatures()
    with no_grad():
        ctx = ops.reshape(extractor.null_context, (1,) + extractor.null_context.shape)
        ctx = Tensor(np.broadcast_to(ctx.data, (b,) + extractor.null_context.shape).copy(), dtype=ctx.dtype)
        x = _tokens_in(net, lat, np.zeros_like(lat), np.zeros(b, dtype=np.int64))
        for i, blk in enumerate(net.blocks):
            h = blk.ln1(x)
            q, k, v = A.project_qkv(h, blk.attn)
            feats.append(A.ReferenceKV(k.detach(), v.detach(), i))
            if i == len(net.blocks) - 1:
                break
            x = x + A.self_attention(h, blk.attn, qkv=(q, k, v))
            x = x + A.cross_attention(blk.ln2(x), ctx, blk.cross)
            x = x + blk.ffn(blk.ln3(x))
    return feats
