"""Multi-modal instruction encoding.

An instruction such as ``"replace the red striped square with S*"`` is
tokenized; the ``S*`` placeholder is expanded into N query vectors produced
by a Q-Former that reads the reference image (through a small patch
transformer) and the reference text. The expanded sequence then goes through
a bidirectional text encoder, giving the conditioning sequence ``c_m``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from refedit import attention as A
from refedit.forge.describe import PLACEHOLDER, vocabulary_words
from refedit.layers import FeedForward, LayerNorm, Linear, Module
from refedit.nk import Rng, ShapeError, Tensor, ops

PAD_ID, UNK_ID, PLACEHOLDER_ID = 0, 1, 2
RESERVED = ("<pad>", "<unk>", PLACEHOLDER)


class Vocabulary:
    """Token table; ids are line numbers of the vocabulary file."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:3]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def default(cls):
        return cls(list(RESERVED) + vocabulary_words())

    @classmethod
    def load(cls, path):
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    def __len__(self):
        return len(self.tokens)

    def id(self, word):
        return self.index.get(word, UNK_ID)


@dataclass
class TokenSequence:
    ids: np.ndarray
    placeholder_positions: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)


def tokenize(text, vocab: Vocabulary | None = None):
    vocab = vocab or Vocabulary.default()
    words = text.split()
    ids = np.array([vocab.id(w) for w in words], dtype=np.int64)
    positions = [i for i, t in enumerate(ids) if t == PLACEHOLDER_ID]
    return TokenSequence(ids, positions)


def detokenize(seq: TokenSequence, vocab: Vocabulary | None = None):
    vocab = vocab or Vocabulary.default()
    return " ".join(vocab.tokens[i] for i in seq.ids)


def image_to_array(image):
    """uint8 (H, W, 3) -> float in [-1, 1]."""
    return np.asarray(image, dtype=np.float64) / 127.5 - 1.0


def patchify_image(img, patch):
    """(..., H, W, C) -> (..., (H/p)*(W/p), p*p*C)."""
    *lead, h, w, c = img.shape
    x = img.reshape(tuple(lead) + (h // patch, patch, w // patch, patch, c))
    n = len(lead)
    x = np.moveaxis(x, n + 2, n + 1)
    return x.reshape(tuple(lead) + ((h // patch) * (w // patch), patch * patch * c))


def _pad_bias(lengths, total, dtype):
    """(b, 1, 1, total) additive bias: 0 on real keys, -1e9 on padding."""
    bias = np.zeros((len(lengths), 1, 1, total), dtype=dtype)
    for i, n in enumerate(lengths):
        bias[i, ..., n:] = -1e9
    return bias


class EncoderBlock(Module):
    """Pre-norm bidirectional transformer block."""

    def __init__(self, rng, dim, heads, hidden):
        self.ln1 = LayerNorm(dim)
        self.attn = A.AttentionParams(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, hidden)

    def __call__(self, x, key_bias=None):
        x = x + A.self_attention(self.ln1(x), self.attn, key_bias=key_bias)
        return x + self.ffn(self.ln2(x))


class QFormerBlock(Module):
    """Self-attention over [queries, reference text], cross-attention to image features, FFN."""

    def __init__(self, rng, dim, heads, hidden):
        self.ln1 = LayerNorm(dim)
        self.self_attn = A.AttentionParams(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.cross_attn = A.AttentionParams(rng, dim, heads)
        self.ln3 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, hidden)

    def __call__(self, w, image_features, key_bias=None):
        w = w + A.self_attention(self.ln1(w), self.self_attn, key_bias=key_bias)
        w = w + A.cross_attention(self.ln2(w), image_features, self.cross_attn)
        return w + self.ffn(self.ln3(w))


@dataclass(frozen=True)
class InstructionConfig:
    dim: int = 128
    heads: int = 4
    text_layers: int = 2
    tower_layers: int = 2
    qformer_layers: int = 2
    num_queries: int = 16
    image_size: int = 32
    image_patch: int = 4
    max_len: int = 48
    ffn_mult: int = 4


class ImageTower(Module):
    def __init__(self, rng, cfg: InstructionConfig):
        n_patches = (cfg.image_size // cfg.image_patch) ** 2
        self.patch_proj = Linear(rng, cfg.image_patch * cfg.image_patch * 3, cfg.dim)
        self.pos = Tensor(rng.normal((n_patches, cfg.dim)) * 0.02, requires_grad=True)
        self.blocks = [EncoderBlock(rng, cfg.dim, cfg.heads, cfg.dim * cfg.ffn_mult) for _ in range(cfg.tower_layers)]
        self.ln = LayerNorm(cfg.dim)

    def __call__(self, images, patch):
        patches = patchify_image(image_to_array(images), patch).astype(self.pos.dtype)
        x = self.patch_proj(Tensor(patches, dtype=self.pos.dtype)) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.ln(x)


class QFormer(Module):
    def __init__(self, rng, cfg: InstructionConfig):
        self.queries = Tensor(rng.normal((cfg.num_queries, cfg.dim)) * 0.02, requires_grad=True)
        self.blocks = [QFormerBlock(rng, cfg.dim, cfg.heads, cfg.dim * cfg.ffn_mult) for _ in range(cfg.qformer_layers)]
        self.proj = Linear(rng, cfg.dim, cfg.dim)


class InstructionEncoder(Module):
    def __init__(self, rng: Rng, cfg: InstructionConfig = InstructionConfig(), vocab: Vocabulary | None = None):
        self._cfg = cfg
        self._vocab = vocab or Vocabulary.default()
        self.token_table = Tensor(rng.normal((len(self._vocab), cfg.dim)) * 0.02, requires_grad=True)
        self.pos = Tensor(rng.normal((cfg.max_len, cfg.dim)) * 0.02, requires_grad=True)
        self.text_blocks = [EncoderBlock(rng, cfg.dim, cfg.heads, cfg.dim * cfg.ffn_mult) for _ in range(cfg.text_layers)]
        self.text_ln = LayerNorm(cfg.dim)
        self.tower = ImageTower(rng, cfg)
        self.qformer = QFormer(rng, cfg)

    @property
    def config(self):
        return self._cfg

    @property
    def vocab(self):
        return self._vocab

    def tokenize(self, text):
        return tokenize(text, self._vocab)

    # -- reference encoding ---------------------------------------------------
    def _check_image(self, images):
        s = self._cfg.image_size
        if images.shape[-3:] != (s, s, 3):
            raise ShapeError(f"reference image shape {images.shape[-3:]} != ({s}, {s}, 3)")

    def encode_reference(self, ref_images, ref_texts):
        """Reference images (b, H, W, 3) + texts -> pseudo-word vectors O (b, N, d).

        ``ref_texts`` is a list of TokenSequence (or strings). A single image
        (H, W, 3) with one text returns (N, d).
        """
        ref_images = np.asarray(ref_images)
        single = ref_images.ndim == 3
        if single:
            ref_images = ref_images[None]
            ref_texts = [ref_texts]
        self._check_image(ref_images)
        ref_texts = [self.tokenize(t) if isinstance(t, str) else t for t in ref_texts]
        b = ref_images.shape[0]
        qf = self.qformer
        n = self._cfg.num_queries
        queries = ops.reshape(qf.queries, (1, n, self._cfg.dim)) + Tensor(np.zeros((b, 1, 1), dtype=qf.queries.dtype))
        if qf.blocks:
            lengths = [len(t) for t in ref_texts]
            tmax = max(lengths)
            ids = np.zeros((b, tmax), dtype=np.int64)
            for i, t in enumerate(ref_texts):
                ids[i, : len(t)] = t.ids
            w = ops.concat([queries, ops.embedding(self.token_table, ids)], axis=1) if tmax else queries
            bias = None
            if tmax and min(lengths) != tmax:
                bias = _pad_bias([n + k for k in lengths], n + tmax, qf.queries.dtype)
            feats = self.tower(ref_images, self._cfg.image_patch)
            for blk in qf.blocks:
                w = blk(w, feats, bias)
            queries = w[:, :n]
        out = qf.proj(queries)
        return out[0] if single else out

    # -- instruction encoding -------------------------------------------------
    def _embed_sequence(self, tokens: TokenSequence, O):
        if tokens.placeholder_positions and O is None:
            raise ValueError("instruction contains S* but no reference encoding was given")
        if O is not None and not tokens.placeholder_positions:
            raise ValueError("reference encoding given for an instruction without S*")
        if len(tokens.placeholder_positions) > 1:
            raise ValueError("only one S* placeholder per instruction is supported")
        ids = tokens.ids if len(tokens) else np.array([PAD_ID], dtype=np.int64)
        emb = ops.embedding(self.token_table, ids)
        if O is None:
            return emb
        p = tokens.placeholder_positions[0]
        parts = [emb[:p], O, emb[p + 1 :]]
        return ops.concat([t for t in parts if t.shape[0]], axis=0)

    def _run_text(self, x, lengths):
        total = x.shape[1]
        if total > self._cfg.max_len:
            raise ShapeError(f"instruction length {total} exceeds max_len {self._cfg.max_len}")
        x = x + self.pos[:total]
        bias = None if min(lengths) == total else _pad_bias(lengths, total, x.dtype)
        for blk in self.text_blocks:
            x = blk(x, bias)
        return self.text_ln(x), bias

    def encode_instruction(self, tokens, O=None):
        """TokenSequence (+ O if it has S*) -> c_m of shape (|T| - |P| + |P| N, d).

        The empty instruction is encoded as a single padding token.
        """
        if isinstance(tokens, str):
            tokens = self.tokenize(tokens)
        seq = self._embed_sequence(tokens, O)
        out, _ = self._run_text(ops.reshape(seq, (1,) + seq.shape), [seq.shape[0]])
        return out[0]

    def encode_batch(self, token_seqs, O_list):
        """Batched encoding with right padding.

        Returns ``(c_m, key_bias)`` with c_m (b, L, d) and key_bias
        (b, 1, 1, L) or None when all lengths agree.
        """
        seqs = [self._embed_sequence(t, o) for t, o in zip(token_seqs, O_list)]
        lengths = [s.shape[0] for s in seqs]
        total = max(lengths)
        d = self._cfg.dim
        rows = []
        for s in seqs:
            if s.shape[0] < total:
                s = ops.concat([s, Tensor(np.zeros((total - s.shape[0], d), dtype=s.dtype))], axis=0)
            rows.append(ops.reshape(s, (1, total, d)))
        x = ops.concat(rows, axis=0)
        return self._run_text(x, lengths)

    def null_embedding(self):
        """Encoding of the empty instruction, used for unconditional branches."""
        return self.encode_instruction(TokenSequence(np.zeros(0, dtype=np.int64), []))


def embedding_length(n_tokens, n_placeholders, num_queries=16):
    return n_tokens - n_placeholders + n_placeholders * num_queries
