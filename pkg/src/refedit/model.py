"""The complete editing model: instruction encoder, denoiser, refer branches, extractor.

Parameter names are namespaced ``instruction.*``, ``denoiser.*``, ``drra.*``
and ``extractor.*``; they double as checkpoint entry names and as the keys of
the trainer's freeze mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from refedit.checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from refedit.denoiser import (
    Denoiser,
    DenoiserConfig,
    DrraParams,
    NoiseInputs,
    ReferenceFeatures,
    denoiser_forward,
    extract_reference_features,
    snapshot_to_extractor,
)
from refedit.diffusion import Schedule, noise_from_residual
from refedit.instruction import InstructionConfig, InstructionEncoder, TokenSequence, Vocabulary, tokenize
from refedit.nk import Rng, Tensor, no_grad, ops

MODES = ("none", "drra", "rasa")
_ARCH_FIELDS = (
    "dim", "blocks", "heads", "patch", "image_size", "ffn_mult",
    "text_layers", "tower_layers", "qformer_layers", "num_queries", "max_len", "vocab_size", "mode",
)


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 128
    blocks: int = 4
    heads: int = 4
    patch: int = 4
    image_size: int = 32
    ffn_mult: int = 4
    text_layers: int = 2
    tower_layers: int = 2
    qformer_layers: int = 2
    num_queries: int = 16
    max_len: int = 48

    def denoiser(self):
        return DenoiserConfig(self.image_size, self.patch, self.dim, self.blocks, self.heads, self.ffn_mult, self.dim)

    def instruction(self):
        return InstructionConfig(
            self.dim, self.heads, self.text_layers, self.tower_layers, self.qformer_layers,
            self.num_queries, self.image_size, self.patch, self.max_len, self.ffn_mult,
        )


@dataclass
class Condition:
    """Encoded instruction batch: context (b, L, d) and optional key-padding bias."""

    context: Tensor
    bias: np.ndarray | None = None
    lengths: list = field(default_factory=list)


class EditModel:
    def __init__(self, config: ModelConfig = ModelConfig(), seed=0, vocab: Vocabulary | None = None):
        self.config = config
        rng = Rng(seed, stream=7)
        self.instruction = InstructionEncoder(rng.child(1), config.instruction(), vocab)
        self.denoiser = Denoiser(rng.child(2), config.denoiser())
        self.drra: DrraParams | None = None
        self.extractor = None
        self.mode = "none"

    # -- parameter bookkeeping ----------------------------------------------
    def groups(self):
        out = {"instruction": self.instruction, "denoiser": self.denoiser}
        if self.drra is not None:
            out["drra"] = self.drra
        if self.extractor is not None:
            out["extractor"] = self.extractor
        return out

    def named_parameters(self):
        params = {}
        for group, module in self.groups().items():
            if group == "extractor":
                params.update({f"extractor.{k}": v for k, v in module.net.named_parameters().items()})
                params["extractor.null_context"] = module.null_context
            else:
                params.update(module.named_parameters(group + "."))
        return params

    def state_arrays(self):
        return {k: np.array(v.data, dtype=np.float32) for k, v in self.named_parameters().items()}

    @property
    def has_reference(self):
        return self.drra is not None

    def attach_reference(self, mode="drra"):
        """Snapshot the extractor from the current denoiser and add fresh refer branches."""
        if mode not in ("drra", "rasa"):
            raise ValueError(f"reference mode must be 'drra' or 'rasa', got {mode!r}")
        with no_grad():
            null = self.instruction.null_embedding()
        self.extractor = snapshot_to_extractor(self.denoiser, null)
        self.drra = DrraParams(self.denoiser.config)
        self.mode = mode

    # -- conditioning -------------------------------------------------------
    def encode_conditions(self, instructions, ref_images, ref_texts):
        """Instructions (strings or TokenSequence) + per-item reference (or None)."""
        seqs = [tokenize(s, self.instruction.vocab) if isinstance(s, str) else s for s in instructions]
        with_ref = [i for i, s in enumerate(seqs) if s.placeholder_positions]
        O_list = [None] * len(seqs)
        if with_ref:
            imgs = np.stack([ref_images[i] for i in with_ref])
            texts = [ref_texts[i] if not isinstance(ref_texts[i], str) else tokenize(ref_texts[i], self.instruction.vocab)
                     for i in with_ref]
            O = self.instruction.encode_reference(imgs, texts)
            for j, i in enumerate(with_ref):
                O_list[i] = O[j]
        ctx, bias = self.instruction.encode_batch(seqs, O_list)
        return Condition(ctx, bias, [len(s) for s in seqs])

    def null_condition(self, b):
        return self.encode_conditions([TokenSequence(np.zeros(0, dtype=np.int64), [])] * b, [None] * b, [None] * b)

    def reference_features(self, ref_images):
        if self.extractor is None:
            raise ValueError("model has no detail extractor (train the refer phase first)")
        return extract_reference_features(ref_images, self.extractor)

    # -- noise prediction ---------------------------------------------------
    def predict_noise(self, x_t, x_o, cond: Condition, t, f_ref: ReferenceFeatures | None = None, lam=1.0,
                      schedule: Schedule | None = None):
        t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        inputs = NoiseInputs(x_t, x_o, cond.context, t, cond.bias)
        out = denoiser_forward(self.denoiser, inputs, f_ref, lam, self.drra, self.mode if self.drra else "drra")
        # The network predicts x_0 - x_o; with the zero-init output layer a fresh
        # model therefore already reproduces the original image.
        return noise_from_residual(out, x_t, x_o, t, schedule or Schedule.linear())

    def guidance_branches(self, x_o, cond: Condition, null: Condition, f_ref=None, lam=1.0, schedule=None):
        """Callable (x_t, t) -> (e_uu, e_iu, e_ic), evaluated as one 3b batch.

        ``e_uu`` uses zeroed x_o and the null instruction, ``e_iu`` the real
        x_o and the null instruction, ``e_ic`` both conditions. ``f_ref`` and
        ``lam`` are shared by all three.
        """
        b = x_o.shape[0]
        ctx3, bias3 = _stack_conditions([null, null, cond])
        xo3 = np.concatenate([np.zeros_like(x_o), x_o, x_o])
        f3 = None if f_ref is None else ReferenceFeatures(
            type(kv)(ops.concat([kv.keys] * 3, 0), ops.concat([kv.values] * 3, 0), kv.block_index) for kv in f_ref
        )
        lam3 = np.tile(np.broadcast_to(np.asarray(lam, dtype=np.float64), (b,)), 3)
        c3 = Condition(ctx3, bias3)

        def branches(x_t, t):
            with no_grad():
                eps = self.predict_noise(np.concatenate([x_t] * 3), xo3, c3, t, f3, lam3, schedule).data
            return eps[:b], eps[b : 2 * b], eps[2 * b :]

        return branches

    # -- persistence --------------------------------------------------------
    def arch_vector(self):
        c = self.config
        values = [c.dim, c.blocks, c.heads, c.patch, c.image_size, c.ffn_mult, c.text_layers,
                  c.tower_layers, c.qformer_layers, c.num_queries, c.max_len, len(self.instruction.vocab),
                  MODES.index(self.mode)]
        return np.asarray(values, dtype=np.float32)

    def save(self, path):
        arrays = {"meta.arch": self.arch_vector()}
        arrays.update(self.state_arrays())
        write_checkpoint(path, arrays)

    @classmethod
    def from_arrays(cls, arrays, vocab: Vocabulary | None = None):
        if "meta.arch" not in arrays:
            raise CheckpointError("checkpoint has no meta.arch entry")
        vals = [int(round(float(v))) for v in arrays["meta.arch"]]
        if len(vals) != len(_ARCH_FIELDS):
            raise CheckpointError("meta.arch has an unexpected layout")
        arch = dict(zip(_ARCH_FIELDS, vals))
        mode = MODES[arch.pop("mode")]
        vocab_size = arch.pop("vocab_size")
        model = cls(ModelConfig(**arch), seed=0, vocab=vocab)
        if len(model.instruction.vocab) != vocab_size:
            raise CheckpointError(f"vocabulary size {len(model.instruction.vocab)} != checkpoint {vocab_size}")
        if mode != "none":
            model.attach_reference(mode)
        params = model.named_parameters()
        extra = set(arrays) - set(params) - {"meta.arch"}
        if extra:
            raise CheckpointError(f"unexpected checkpoint entries: {sorted(extra)[:5]}")
        for name, t in params.items():
            if name not in arrays:
                raise CheckpointError(f"checkpoint missing entry {name!r}")
            if arrays[name].shape != t.shape:
                raise CheckpointError(f"entry {name!r}: shape {arrays[name].shape} != {t.shape}")
            t.data[...] = arrays[name]
        return model

    @classmethod
    def load(cls, path, vocab: Vocabulary | None = None):
        return cls.from_arrays(read_checkpoint(path), vocab)


def _stack_conditions(conds):
    """Right-pad and stack several Conditions along the batch axis."""
    total = max(c.context.shape[1] for c in conds)
    ctxs, biases = [], []
    for c in conds:
        b, n, d = c.context.shape
        ctx = c.context
        bias = c.bias if c.bias is not None else np.zeros((b, 1, 1, n), dtype=ctx.dtype)
        if n < total:
            ctx = ops.concat([ctx, Tensor(np.zeros((b, total - n, d), dtype=ctx.dtype))], axis=1)
            pad = np.full((b, 1, 1, total - n), -1e9, dtype=bias.dtype)
            bias = np.concatenate([bias, pad], axis=-1)
        ctxs.append(ctx)
        biases.append(bias)
    bias = np.concatenate(biases, axis=0)
    return ops.concat(ctxs, axis=0), (bias if np.any(bias) else None)
