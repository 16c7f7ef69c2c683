"""Desk-scale image embedder used by dataset filtering and evaluation.

Images are average-pooled to 8x8, centred to [-1, 1], and multiplied by a
fixed-seed Gaussian projection to 32 dimensions. Masked variants replace
pixels outside the mask with mid-grey (which maps to zero) before pooling.
"""

from __future__ import annotations

from typing import Protocol

import numpy as np

from refedit.nk import Rng


class Embedder(Protocol):
    def embed(self, image: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray: ...


def pool(image, grid=8):
    h, w = image.shape[:2]
    if h % grid or w % grid:
        raise ValueError(f"image {h}x{w} not divisible into a {grid}x{grid} grid")
    img = image.astype(np.float64).reshape(grid, h // grid, grid, w // grid, -1)
    return img.mean(axis=(1, 3))


class PixelEmbedder:
    def __init__(self, seed=0, dim=32, grid=8, channels=3):
        self.grid = grid
        self.dim = dim
        self.projection = Rng(seed, stream=0xE3BED).normal((grid * grid * channels, dim), dtype=np.float64)

    def embed(self, image, mask=None):
        img = np.asarray(image, dtype=np.float64) / 127.5 - 1.0
        if mask is not None:
            img = np.where(np.asarray(mask, dtype=bool)[..., None], img, 0.0)
        return pool(img, self.grid).reshape(-1) @ self.projection


def cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for a zero-norm embedding")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def similarity(a, b, embedder=None, mask_a=None, mask_b=None):
    embedder = embedder or default_embedder()
    return cosine(embedder.embed(a, mask_a), embedder.embed(b, mask_b))


_DEFAULT = None


def default_embedder():
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = PixelEmbedder()
    return _DEFAULT
