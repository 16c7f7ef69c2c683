"""Registry of differentiable blocks and their finite-difference checks.

Each check builds a tiny float64 instance, reduces the block output with a
fixed random weighting (a plain sum would zero out softmax gradients), and
returns the worst relative error over the inputs/parameters it covers.
"""

from __future__ import annotations

import numpy as np

from refedit import attention as A
from refedit.denoiser import Denoiser, DenoiserConfig, DrraParams, NoiseInputs, ReferenceFeatures, denoiser_forward
from refedit.instruction import EncoderBlock, QFormerBlock
from refedit.nk import Rng, Tensor, finite_diff_check, ops, precision

TOLERANCE = 1e-4


def _rand(rng, *shape, grad=True):
    return Tensor(rng.normal(shape, dtype=np.float64), requires_grad=grad)


def _weighted(out, rng):
    return (out * Tensor(rng.normal(out.shape, dtype=np.float64))).sum()


def _check_all(f, tensors):
    return max(finite_diff_check(f, t) for t in tensors)


def check_matmul():
    rng = Rng(1)
    a, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 5)
    w = _rand(rng, 2, 3, 5, grad=False)
    return _check_all(lambda: (ops.matmul(a, b) * w).sum(), [a, b])


def check_softmax():
    rng = Rng(2)
    x = _rand(rng, 3, 6)
    w = _rand(rng, 3, 6, grad=False)
    return max(_check_all(lambda: (ops.softmax(x, axis=ax) * w).sum(), [x]) for ax in (-1, 0))


def check_layer_norm():
    rng = Rng(3)
    x, g, b = _rand(rng, 4, 6), _rand(rng, 6), _rand(rng, 6)
    w = _rand(rng, 4, 6, grad=False)
    return _check_all(lambda: (ops.layer_norm(x, g, b) * w).sum(), [x, g, b])


def check_gelu():
    rng = Rng(4)
    x = _rand(rng, 5, 7)
    w = _rand(rng, 5, 7, grad=False)
    return _check_all(lambda: (ops.gelu(x) * w).sum(), [x])


def _attn_setup(seed):
    rng = Rng(seed)
    p = A.AttentionParams(rng, 8, 2)
    x = _rand(rng, 2, 5, 8)
    ref = A.ReferenceKV(_rand(rng, 2, 4, 8), _rand(rng, 2, 4, 8))
    w = _rand(rng, 2, 5, 8, grad=False)
    return rng, p, x, ref, w


def check_self_attention():
    _, p, x, _, w = _attn_setup(5)
    return _check_all(lambda: (A.self_attention(x, p) * w).sum(), [x] + p.parameters())


def check_rasa():
    _, p, x, ref, w = _attn_setup(6)
    return _check_all(lambda: (A.rasa(x, ref, p) * w).sum(), [x, ref.keys, ref.values] + p.parameters())


def check_drra():
    rng, p, x, ref, w = _attn_setup(7)
    br = A.ReferBranchParams(8)
    # Move the branch off its zero/identity init so every path carries gradient.
    for t in br.parameters():
        t.data += 0.3 * rng.normal(t.shape, dtype=np.float64)
    tensors = [x, ref.keys, ref.values] + p.parameters() + br.parameters()
    return _check_all(lambda: (A.drra(x, ref, 0.7, p, br) * w).sum(), tensors)


def check_cross_attention():
    rng = Rng(8)
    p = A.AttentionParams(rng, 8, 2, kv_dim=6)
    x, ctx = _rand(rng, 2, 5, 8), _rand(rng, 2, 3, 6)
    w = _rand(rng, 2, 5, 8, grad=False)
    return _check_all(lambda: (A.cross_attention(x, ctx, p) * w).sum(), [x, ctx] + p.parameters())


def check_denoiser_block():
    """One-block denoiser, DRRA active, every parameter group checked."""
    rng = Rng(9)
    cfg = DenoiserConfig(image_size=8, patch=4, dim=8, blocks=1, heads=2, ffn_mult=2, ctx_dim=8)
    net = Denoiser(rng, cfg)
    drra = DrraParams(cfg)
    for t in net.parameters() + drra.parameters():
        t.data += 0.1 * rng.normal(t.shape, dtype=np.float64)
    x_t = rng.normal((2, 4, 8, 8), dtype=np.float64)
    x_o = rng.normal((2, 4, 8, 8), dtype=np.float64)
    ctx = _rand(rng, 2, 3, 8)
    ref = ReferenceFeatures([A.ReferenceKV(_rand(rng, 2, 4, 8), _rand(rng, 2, 4, 8), 0)])
    inputs = NoiseInputs(x_t, x_o, ctx, np.array([3, 17]))
    w = _rand(rng, 2, 4, 8, 8, grad=False)

    def f():
        return (denoiser_forward(net, inputs, ref, np.array([1.0, 0.5]), drra) * w).sum()

    return _check_all(f, [ctx, ref[0].keys] + net.parameters() + drra.parameters())


def check_qformer_block():
    rng = Rng(10)
    blk = QFormerBlock(rng, 8, 2, 16)
    q, feats = _rand(rng, 2, 5, 8), _rand(rng, 2, 6, 8)
    w = _rand(rng, 2, 5, 8, grad=False)
    return _check_all(lambda: (blk(q, feats) * w).sum(), [q, feats] + blk.parameters())


def check_text_block():
    rng = Rng(11)
    blk = EncoderBlock(rng, 8, 2, 16)
    x = _rand(rng, 2, 5, 8)
    bias = np.zeros((2, 1, 1, 5))
    bias[1, ..., 3:] = -1e9
    w = _rand(rng, 2, 5, 8, grad=False)
    return _check_all(lambda: (blk(x, bias) * w).sum(), [x] + blk.parameters())


REGISTRY = {
    "matmul": check_matmul,
    "softmax": check_softmax,
    "layer_norm": check_layer_norm,
    "gelu": check_gelu,
    "self_attention": check_self_attention,
    "rasa": check_rasa,
    "drra": check_drra,
    "cross_attention": check_cross_attention,
    "denoiser_block": check_denoiser_block,
    "qformer_block": check_qformer_block,
    "text_block": check_text_block,
}


def run_suite(registry=None, tolerance=TOLERANCE):
    """[(name, rel_error, passed)] for every registered block, in float64."""
    rows = []
    with precision(np.float64):
        for name, fn in (registry or REGISTRY).items():
            err = fn()
            rows.append((name, err, bool(err < tolerance)))
    return rows


def format_table(rows):
    lines = [f"{'block':<18} {'rel_err':>10}  status"]
    for name, err, ok in rows:
        lines.append(f"{name:<18} {err:10.2e}  {'pass' if ok else 'FAIL'}")
    return "\n".join(lines) + "\n"
