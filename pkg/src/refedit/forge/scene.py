"""Procedural scenes: gradient backgrounds with simple textured shapes.

Everything is rendered from a :class:`SceneSpec`, so masks are exact by
construction and any object can be re-rendered, swapped, or dropped.
Texture patterns are anchored to absolute pixel coordinates: the same object
at the same placement produces the same pixels regardless of background.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from refedit.nk import Rng

IMAGE_SIZE = 32
MIN_AREA = 16

CATEGORIES = ("circle", "square", "triangle", "star", "diamond", "cross", "ring", "hexagon")
HUES = {
    "red": (220, 40, 40),
    "orange": (240, 140, 30),
    "yellow": (235, 215, 40),
    "green": (50, 180, 60),
    "cyan": (40, 200, 210),
    "blue": (40, 80, 220),
    "purple": (140, 60, 200),
    "pink": (240, 110, 180),
}
TEXTURES = ("solid", "striped", "dotted", "checkered")


@dataclass(frozen=True)
class Identity:
    category: str
    hue: str
    texture: str
    phase: int = 0

    def as_dict(self):
        return {"category": self.category, "hue": self.hue, "texture": self.texture, "phase": self.phase}

    @classmethod
    def from_dict(cls, d):
        return cls(d["category"], d["hue"], d["texture"], int(d["phase"]))


@dataclass(frozen=True)
class SceneObject:
    identity: Identity
    cx: float
    cy: float
    radius: float


@dataclass(frozen=True)
class Background:
    top: tuple
    bottom: tuple
    noise_seed: int
    noise_amp: float = 10.0


@dataclass
class SceneSpec:
    background: Background
    objects: list = field(default_factory=list)
    size: int = IMAGE_SIZE

    def mask(self, index):
        return object_mask(self.objects[index], self.size)

    def with_objects(self, objects):
        return replace(self, objects=list(objects))

    def with_background(self, background):
        return replace(self, background=background)


def _grid(size):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return xs + 0.5, ys + 0.5


def shape_mask(category, u, v):
    """Membership test in normalized object coordinates (radius 1)."""
    r = np.hypot(u, v)
    if category == "circle":
        return r <= 1.0
    if category == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8
    if category == "triangle":
        return (v >= -0.9) & (v <= 0.8) & (np.abs(u) <= (v + 0.9) * 0.55)
    if category == "star":
        theta = np.arctan2(v, u) + np.pi / 2
        return r <= 0.45 + 0.55 * (0.5 + 0.5 * np.cos(5 * theta)) ** 1.5
    if category == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if category == "cross":
        return ((np.abs(u) <= 0.35) & (np.abs(v) <= 0.95)) | ((np.abs(v) <= 0.35) & (np.abs(u) <= 0.95))
    if category == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if category == "hexagon":
        return np.maximum(np.abs(u) * 0.866 + np.abs(v) * 0.5, np.abs(v)) <= 0.87
    raise ValueError(f"unknown category {category!r}")


def object_mask(obj: SceneObject, size=IMAGE_SIZE):
    xs, ys = _grid(size)
    return shape_mask(obj.identity.category, (xs - obj.cx) / obj.radius, (ys - obj.cy) / obj.radius)


def texture_factor(texture, phase, size=IMAGE_SIZE):
    """Per-pixel brightness multiplier for a texture, in absolute coordinates."""
    ys, xs = np.mgrid[0:size, 0:size]
    if texture == "solid":
        return np.ones((size, size))
    if texture == "striped":
        return np.where(((ys + phase) // 2) % 2 == 0, 1.0, 0.45)
    if texture == "dotted":
        return np.where(((xs + phase) % 3 == 0) & ((ys + phase) % 3 == 0), 0.35, 1.0)
    if texture == "checkered":
        return np.where((((xs + phase) // 2) + ((ys + phase) // 2)) % 2 == 0, 1.0, 0.5)
    raise ValueError(f"unknown texture {texture!r}")


def render_background(bg: Background, size=IMAGE_SIZE):
    t = (np.arange(size) + 0.5)[:, None] / size
    top = np.asarray(bg.top, dtype=np.float64)
    bottom = np.asarray(bg.bottom, dtype=np.float64)
    img = (1 - t)[..., None] * top + t[..., None] * bottom
    img = np.broadcast_to(img, (size, size, 3)).copy()
    # Low-frequency value noise: bilinear upsampling of a 4x4 grid.
    grid = Rng(bg.noise_seed).uniform(-1.0, 1.0, (4, 4))
    coords = (np.arange(size) + 0.5) / size * 3
    i0 = np.clip(np.floor(coords).astype(int), 0, 2)
    f = coords - i0
    rows = grid[i0] * (1 - f)[:, None] + grid[i0 + 1] * f[:, None]
    noise = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    img += bg.noise_amp * noise[..., None]
    return img


def render(scene: SceneSpec):
    """Scene -> uint8 RGB image (H, W, 3)."""
    img = render_background(scene.background, scene.size)
    for obj in scene.objects:
        m = object_mask(obj, scene.size)
        color = np.asarray(HUES[obj.identity.hue], dtype=np.float64)
        tex = texture_factor(obj.identity.texture, obj.identity.phase, scene.size)
        img[m] = color[None, :] * tex[m][:, None]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def random_identity(rng: Rng, exclude=None):
    while True:
        ident = Identity(
            CATEGORIES[int(rng.integers(len(CATEGORIES)))],
            list(HUES)[int(rng.integers(len(HUES)))],
            TEXTURES[int(rng.integers(len(TEXTURES)))],
            int(rng.integers(4)),
        )
        if exclude is None or (ident.category, ident.hue) != (exclude.category, exclude.hue):
            return ident


def random_background(rng: Rng):
    base = rng.uniform(70, 190, 3)
    top = np.clip(base + rng.uniform(-45, 45, 3), 0, 255)
    bottom = np.clip(base + rng.uniform(-45, 45, 3), 0, 255)
    return Background(tuple(float(v) for v in top), tuple(float(v) for v in bottom), int(rng.integers(2**31)))


def fits(obj, others, size):
    m = object_mask(obj, size)
    if m.sum() < MIN_AREA:
        return False
    grown = m.copy()
    grown[1:] |= m[:-1]
    grown[:-1] |= m[1:]
    grown[:, 1:] |= m[:, :-1]
    grown[:, :-1] |= m[:, 1:]
    for o in others:
        if (grown & object_mask(o, size)).any():
            return False
    return True


def gen_scene(seed, size=IMAGE_SIZE, max_objects=3):
    """Deterministic scene with 1..max_objects non-touching objects.

    Returns ``(scene, image)``.
    """
    rng = Rng(seed, stream=0x5CE7E)
    background = random_background(rng)
    n_target = int(rng.integers(1, max_objects + 1))
    objects = []
    attempts = 0
    while len(objects) < n_target and attempts < 50:
        attempts += 1
        radius = float(rng.uniform(5.0, 8.0))
        cx = float(rng.uniform(radius, size - radius))
        cy = float(rng.uniform(radius, size - radius))
        obj = SceneObject(random_identity(rng), cx, cy, radius)
        if fits(obj, objects, size):
            objects.append(obj)
    if not objects:
        objects.append(SceneObject(random_identity(rng), size / 2, size / 2, 7.0))
    scene = SceneSpec(background, objects, size)
    return scene, render(scene)
