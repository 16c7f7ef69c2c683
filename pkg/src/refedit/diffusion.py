"""Noise schedule, forward process, epsilon loss, dual guidance and DDIM sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from refedit.nk import Rng, ShapeError, Tensor, ops


@dataclass(frozen=True)
class Schedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or not b.size:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alphas_cumprod", np.cumprod(1.0 - b))

    @classmethod
    def linear(cls, t_max=200, beta_start=1e-4, beta_end=0.05):
        return cls(np.linspace(beta_start, beta_end, t_max))

    @property
    def t_max(self):
        return self.betas.size

    @property
    def alphas(self):
        return 1.0 - self.betas

    def check(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.t_max):
            raise ValueError(f"timestep out of range [0, {self.t_max})")
        return t.astype(np.int64)


@dataclass(frozen=True)
class EditConfig:
    lam: float = 1.0
    steps: int = 50
    text_scale: float = 5.0
    image_scale: float = 1.5
    seed: int = 0
    clip_x0: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (np.isfinite(self.text_scale) and np.isfinite(self.image_scale) and np.isfinite(self.lam)):
            raise ValueError("guidance scales and lambda must be finite")


def _per_item(coef, x):
    coef = np.asarray(coef, dtype=x.dtype)
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim))


def q_sample(x0, t, noise, schedule: Schedule):
    """x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) noise; t scalar or per item."""
    x0 = np.asarray(x0)
    t = schedule.check(t)
    if np.shape(noise) != x0.shape:
        raise ShapeError(f"noise shape {np.shape(noise)} != x_0 shape {x0.shape}")
    abar = schedule.alphas_cumprod[t]
    return _per_item(np.sqrt(abar), x0) * x0 + _per_item(np.sqrt(1.0 - abar), x0) * noise


def noise_from_residual(residual, x_t, x_o, t, schedule: Schedule):
    """Turn a network output read as x_0 - x_o into an epsilon prediction.

    eps = (x_t - sqrt(abar_t) (x_o + residual)) / sqrt(1 - abar_t). A zero
    residual predicts "the edit equals the original", which is what most
    pixels of an edit need.
    """
    t = schedule.check(np.broadcast_to(t, (x_t.shape[0],)))
    abar = schedule.alphas_cumprod[t]
    c_in = _per_item(1.0 / np.sqrt(1.0 - abar), x_t)
    c_out = _per_item(np.sqrt(abar / (1.0 - abar)), x_t)
    const = Tensor((c_in * x_t - c_out * x_o).astype(residual.dtype))
    return const - residual * Tensor(c_out.astype(residual.dtype))


def loss_weights(t, schedule: Schedule, mode="unit"):
    if mode == "unit":
        return np.ones(np.shape(t))
    if mode == "min_snr":
        # Min-SNR-5 weighting expressed for epsilon prediction.
        abar = schedule.alphas_cumprod[t]
        snr = abar / (1.0 - abar)
        return np.minimum(snr, 5.0) / snr
    raise ValueError(f"unknown loss weighting {mode!r}")


def training_loss(x0, predict, schedule: Schedule, rng: Rng, w_t_mode="unit", t=None, noise=None):
    """Weighted epsilon-prediction loss, summed per item and averaged over the batch.

    ``predict(x_t, t)`` returns a Tensor shaped like ``x0``. ``t``/``noise``
    may be fixed for tests; otherwise t ~ U{0..T-1} and noise ~ N(0, 1).
    """
    x0 = np.asarray(x0)
    if x0.ndim == 0 or x0.shape[0] == 0:
        raise ValueError("training_loss needs a non-empty batch")
    b = x0.shape[0]
    if t is None:
        t = rng.integers(0, schedule.t_max, size=b)
    t = schedule.check(np.broadcast_to(t, (b,)))
    if noise is None:
        noise = rng.normal(x0.shape, dtype=x0.dtype)
    x_t = q_sample(x0, t, noise, schedule).astype(x0.dtype)
    pred = predict(x_t, t)
    diff = pred - Tensor(noise, dtype=pred.dtype)
    per_item = ops.sum(ops.reshape(diff * diff, (b, -1)), axis=1)
    w = loss_weights(t, schedule, w_t_mode)
    return ops.mean(per_item * w.astype(pred.dtype))


def cfg_combine(e_uu, e_iu, e_ic, s_T, s_I):
    """Dual guidance: e_uu + s_I (e_iu - e_uu) + s_T (e_ic - e_iu)."""
    e_uu, e_iu, e_ic = np.asarray(e_uu), np.asarray(e_iu), np.asarray(e_ic)
    if not e_uu.shape == e_iu.shape == e_ic.shape:
        raise ShapeError(f"guidance branch shapes differ: {e_uu.shape}, {e_iu.shape}, {e_ic.shape}")
    if s_T == 1 and s_I == 1:
        return e_ic.copy()
    return e_uu + s_I * (e_iu - e_uu) + s_T * (e_ic - e_iu)


def ddim_timesteps(t_max, steps):
    """Descending uniform subset of {0..t_max-1}, always containing both ends."""
    steps = min(steps, t_max)
    ts = np.unique(np.round(np.linspace(0, t_max - 1, steps)).astype(np.int64))
    return ts[::-1]


def ddim_sample(shape, branches, cfg: EditConfig, schedule: Schedule, rng: Rng | None = None, x_T=None):
    """Deterministic (eta = 0) DDIM with three-branch guidance.

    ``branches(x_t, t)`` returns ``(e_uu, e_iu, e_ic)`` for the whole batch.
    Returns the final clean-latent estimate.
    """
    rng = rng or Rng(cfg.seed, stream=0xDD1)
    x = rng.normal(shape, dtype=np.float32) if x_T is None else np.array(x_T, dtype=np.float32)
    abar = schedule.alphas_cumprod
    ts = ddim_timesteps(schedule.t_max, cfg.steps)
    x0 = x
    for i, t in enumerate(ts):
        e_uu, e_iu, e_ic = branches(x, int(t))
        eps = cfg_combine(e_uu, e_iu, e_ic, cfg.text_scale, cfg.image_scale)
        a_t = abar[t]
        x0 = (x - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        if cfg.clip_x0:
            x0 = np.clip(x0, -1.0, 1.0)
            # Keep the implied noise consistent with the clipped estimate.
            eps = (x - np.sqrt(a_t) * x0) / np.sqrt(1.0 - a_t)
        a_prev = abar[ts[i + 1]] if i + 1 < len(ts) else 1.0
        x = (np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps).astype(np.float32)
    return x0.astype(np.float32)
