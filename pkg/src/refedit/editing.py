"""Inference: instruction + original (+ reference) -> edited image."""

from __future__ import annotations

import numpy as np

from refedit.denoiser import decode_latent, encode_latent
from refedit.diffusion import EditConfig, Schedule, ddim_sample
from refedit.instruction import tokenize
from refedit.model import EditModel
from refedit.nk import Rng, no_grad


class ContractError(ValueError):
    """Instruction placeholder and reference image do not match."""


def check_edit_request(instruction, reference, vocab=None):
    seq = tokenize(instruction, vocab)
    if seq.placeholder_positions and reference is None:
        raise ContractError("instruction contains S* but no reference image was given")
    if not seq.placeholder_positions and reference is not None:
        raise ContractError("a reference image was given but the instruction has no S*")
    if len(seq.placeholder_positions) > 1:
        raise ContractError("only one S* placeholder per instruction is supported")
    return seq


def edit_batch(model: EditModel, originals, instructions, references, ref_texts=None, cfg=EditConfig(),
               schedule: Schedule | None = None):
    """Edit a batch of uint8 images; returns uint8 (b, H, W, 3).

    ``references`` holds one image or None per item. With ``cfg.lam == 0`` or
    no references (or a model without refer-attention) the reference-free
    path runs; S* instructions still see the reference through the
    instruction encoder.
    """
    schedule = schedule or Schedule.linear()
    originals = np.asarray(originals)
    b = originals.shape[0]
    ref_texts = ref_texts if ref_texts is not None else [""] * b
    seqs = [check_edit_request(s, r, model.instruction.vocab) for s, r in zip(instructions, references)]
    x_o = encode_latent(originals, model.config.image_size)
    with no_grad():
        cond = model.encode_conditions(seqs, references, ref_texts)
        null = model.null_condition(b)
        f_ref, lam = None, np.zeros(b)
        if model.has_reference and cfg.lam != 0 and any(r is not None for r in references):
            refs = np.stack([r if r is not None else np.zeros_like(originals[0]) for r in references])
            f_ref = model.reference_features(refs)
            lam = np.array([cfg.lam if r is not None else 0.0 for r in references])
    branches = model.guidance_branches(x_o, cond, null, f_ref, lam, schedule)
    rng = Rng(cfg.seed, stream=0xDD1)
    x0 = ddim_sample(x_o.shape, branches, cfg, schedule, rng)
    return decode_latent(x0)


def edit_image(model, original, instruction, reference=None, ref_text="", cfg=EditConfig(), schedule=None):
    return edit_batch(model, original[None], [instruction], [reference], [ref_text], cfg, schedule)[0]
