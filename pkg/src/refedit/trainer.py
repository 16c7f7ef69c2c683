"""Three-phase training: instruction, refer (feature injection), quality tuning."""

from __future__ import annotations

import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from refedit.attention import ReferenceKV
from refedit.denoiser import ReferenceFeatures, encode_latent
from refedit.diffusion import Schedule, training_loss
from refedit.forge.manifest import ManifestError, load_record_images, read_manifest
from refedit.instruction import TokenSequence, tokenize
from refedit.model import EditModel, ModelConfig
from refedit.nk import AdamW, Rng, Tensor, no_grad

PHASES = ("instruction", "refer", "quality")
_TRAINABLE = {
    "instruction": ("denoiser.", "instruction."),
    "refer": ("drra.",),
    "quality": ("denoiser.", "instruction.", "drra."),
}


class PhaseError(RuntimeError):
    """Checkpoint and phase do not fit together."""


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "instruction"
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-3
    p_text: float = 0.05
    p_image: float = 0.05
    p_both: float = 0.05
    quality_fraction: float = 0.25
    seed: int = 0
    w_t_mode: str = "min_snr"
    reference_mode: str = "drra"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        probs = (self.p_text, self.p_image, self.p_both)
        if any(p < 0 or p > 1 for p in probs) or sum(probs) > 1 + 1e-12:
            raise ValueError("dropout probabilities must lie in [0, 1] and sum to at most 1")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not 0 < self.quality_fraction <= 1:
            raise ValueError("quality_fraction must lie in (0, 1]")

    @classmethod
    def for_phase(cls, phase, **kw):
        steps = {"instruction": 2000, "refer": 500, "quality": 1000}[phase]
        return cls(phase=phase, steps=kw.pop("steps", steps), **kw)


class FreezeMask(dict):
    """Checkpoint name -> trainable flag."""

    @classmethod
    def for_phase(cls, phase, names):
        prefixes = _TRAINABLE[phase]
        return cls((n, n.startswith(prefixes) and not n.startswith("extractor.")) for n in names)

    def trainable(self):
        return [n for n, flag in self.items() if flag]


# -- data -----------------------------------------------------------------------
@dataclass
class TrainingSet:
    ids: list
    tasks: list
    x0: np.ndarray
    x_o: np.ndarray
    references: np.ndarray
    has_reference: np.ndarray
    tokens: list
    ref_tokens: list
    scores: list

    def __len__(self):
        return len(self.ids)

    def subset(self, index):
        index = list(index)
        return TrainingSet(
            [self.ids[i] for i in index], [self.tasks[i] for i in index], self.x0[index], self.x_o[index],
            self.references[index], self.has_reference[index], [self.tokens[i] for i in index],
            [self.ref_tokens[i] for i in index], [self.scores[i] for i in index],
        )


def load_training_set(manifest_path, records=None, vocab=None):
    manifest_path = Path(manifest_path)
    records = read_manifest(manifest_path) if records is None else records
    if not records:
        raise ManifestError(f"{manifest_path}: manifest is empty")
    root = manifest_path.parent
    ids, tasks, x0, xo, refs, has_ref, toks, rtoks, scores = ([] for _ in range(9))
    for rec in records:
        imgs = load_record_images(rec, root)
        ids.append(rec["id"])
        tasks.append(rec["task_type"])
        x0.append(encode_latent(imgs["edited"]))
        xo.append(encode_latent(imgs["original"]))
        ref = imgs["reference"]
        has_ref.append(ref is not None)
        refs.append(np.zeros_like(imgs["original"]) if ref is None else ref)
        seq = tokenize(rec["instruction"], vocab)
        if bool(seq.placeholder_positions) != (ref is not None):
            raise ManifestError(f"item {rec['id']}: S* placeholder and reference image disagree")
        toks.append(seq)
        rtoks.append(tokenize(rec.get("reference_text", ""), vocab))
        scores.append(rec.get("scores") or {})
    return TrainingSet(ids, tasks, np.stack(x0), np.stack(xo), np.stack(refs), np.array(has_ref), toks, rtoks, scores)


def composite_score(scores):
    """Higher is better: object fidelity + reference agreement - background leakage."""
    def val(k, default):
        v = scores.get(k)
        return default if v is None else float(v)

    return val("s_er", 1.0) + val("s_txt", 1.0) - val("s_pp", 0.0)


def select_quality_subset(records, fraction):
    """Top ``fraction`` of records by composite filter score; ties broken by id."""
    if not records:
        raise ValueError("cannot select from an empty manifest")
    if fraction >= 1:
        return list(records)
    k = max(1, int(round(fraction * len(records))))
    ranked = sorted(records, key=lambda r: (-composite_score(r.get("scores") or {}), r["id"]))
    return ranked[:k]


def condition_dropout(b, probs, rng: Rng):
    """Per-item (drop_text, drop_image) flags from one uniform draw each."""
    p_text, p_image, p_both = probs
    u = rng.random(b)
    drop_text = (u < p_text) | ((u >= p_text + p_image) & (u < p_text + p_image + p_both))
    drop_image = u >= p_text
    drop_image &= u < p_text + p_image + p_both
    return drop_text, drop_image


def _null_tokens():
    return TokenSequence(np.zeros(0, dtype=np.int64), [])


class _Sampler:
    """Epoch-wise shuffling with a seeded stream."""

    def __init__(self, n, rng):
        self.n, self.rng, self.order, self.pos = n, rng, np.zeros(0, dtype=np.int64), 0

    def take(self, k):
        out = []
        while len(out) < k:
            if self.pos >= len(self.order):
                self.order, self.pos = self.rng.permutation(self.n), 0
            m = min(k - len(out), len(self.order) - self.pos)
            out.extend(self.order[self.pos : self.pos + m])
            self.pos += m
        return np.asarray(out)


def _feature_cache(model, data, batch=32):
    """Extractor features for every item, computed once (the extractor is frozen)."""
    keys = [[] for _ in range(model.config.blocks)]
    values = [[] for _ in range(model.config.blocks)]
    for s in range(0, len(data), batch):
        feats = model.reference_features(data.references[s : s + batch])
        for i, kv in enumerate(feats):
            keys[i].append(kv.keys.data)
            values[i].append(kv.values.data)
    return [(np.concatenate(k), np.concatenate(v)) for k, v in zip(keys, values)]


def _gather(cache, idx):
    return ReferenceFeatures(ReferenceKV(Tensor(k[idx]), Tensor(v[idx]), i) for i, (k, v) in enumerate(cache))


def train(model: EditModel, data: TrainingSet, config: TrainConfig, schedule: Schedule | None = None, log=None):
    """Run ``config.steps`` optimizer steps in place; returns the per-step losses."""
    schedule = schedule or Schedule.linear()
    if config.phase in ("refer", "quality") and not model.has_reference:
        raise PhaseError(f"phase {config.phase!r} needs a model with refer-attention")
    params = model.named_parameters()
    mask = FreezeMask.for_phase(config.phase, params)
    for name, t in params.items():
        t.requires_grad = mask[name]
        t.zero_grad()
    trainable = {n: params[n] for n in mask.trainable()}
    text_frozen = not any(n.startswith("instruction.") for n in trainable)
    opt = AdamW(trainable, lr=config.learning_rate)
    root = Rng(config.seed, stream=PHASES.index(config.phase))
    sampler = _Sampler(len(data), root.child(1))
    drop_rng, noise_rng = root.child(2), root.child(3)
    cache = _feature_cache(model, data) if model.has_reference else None
    probs = (config.p_text, config.p_image, config.p_both)
    losses = []
    for step in range(config.steps):
        idx = sampler.take(config.batch_size)
        drop_text, drop_image = condition_dropout(len(idx), probs, drop_rng)
        seqs = [_null_tokens() if dt else data.tokens[i] for i, dt in zip(idx, drop_text)]
        refs = [data.references[i] if s.placeholder_positions else None for i, s in zip(idx, seqs)]
        rtexts = [data.ref_tokens[i] for i in idx]
        if text_frozen:
            with no_grad():
                cond = model.encode_conditions(seqs, refs, rtexts)
        else:
            cond = model.encode_conditions(seqs, refs, rtexts)
        x_o = data.x_o[idx].copy()
        x_o[drop_image] = 0.0
        f_ref = lam = None
        if cache is not None:
            f_ref = _gather(cache, idx)
            lam = data.has_reference[idx].astype(np.float64)

        def predict(x_t, t):
            return model.predict_noise(x_t, x_o, cond, t, f_ref, 1.0 if lam is None else lam, schedule)

        loss = training_loss(data.x0[idx], predict, schedule, noise_rng, config.w_t_mode)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step}")
        loss.backward()
        opt.step()
        opt.zero_grad()
        losses.append(value)
        if log is not None:
            log(step, config.phase, value)
    for name, t in params.items():
        t.requires_grad = not name.startswith("extractor.")
    return losses


def format_loss_line(step, phase, loss):
    return f"{step}\t{phase}\t{loss:.6f}\n"


def train_phase(config: TrainConfig, manifest_path, ckpt_in, ckpt_out, log_path=None, model_config=None, model_seed=0,
                schedule=None):
    """File-level driver: checkpoint in -> train -> checkpoint out (+ loss log)."""
    if config.phase != "instruction" and ckpt_in is None:
        raise PhaseError(f"phase {config.phase!r} requires an input checkpoint from an earlier phase")
    if config.steps == 0 and ckpt_in is not None:
        if Path(ckpt_in).resolve() != Path(ckpt_out).resolve():
            shutil.copyfile(ckpt_in, ckpt_out)
        if log_path is not None:
            Path(log_path).write_text("", encoding="utf-8")
        return []
    model = EditModel.load(ckpt_in) if ckpt_in is not None else EditModel(model_config or ModelConfig(), model_seed)
    if config.phase == "instruction" and model.has_reference:
        raise PhaseError("instruction phase expects a checkpoint without refer-attention")
    if config.phase == "refer" and not model.has_reference:
        model.attach_reference(config.reference_mode)
    if config.phase == "quality" and not model.has_reference:
        raise PhaseError("quality phase expects a checkpoint from the refer phase")
    records = read_manifest(manifest_path)
    if not records:
        raise ManifestError(f"{manifest_path}: manifest is empty")
    if config.phase == "quality":
        records = select_quality_subset(records, config.quality_fraction)
    data = load_training_set(manifest_path, records, model.instruction.vocab)
    lines = []
    ckpt_out = Path(ckpt_out)

    def log(step, phase, value):
        lines.append(format_loss_line(step, phase, value))
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            model.save(ckpt_out.with_name(f"{ckpt_out.stem}.step{step + 1}{ckpt_out.suffix}"))

    losses = train(model, data, config, schedule, log=log)
    model.save(ckpt_out)
    if log_path is not None:
        Path(log_path).write_text("".join(lines), encoding="utf-8")
    return losses

