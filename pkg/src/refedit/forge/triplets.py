"""Twice-repainting triplet construction and reference augmentation.

A repainter port rewrites either the mask region (new object or plain
background) or the background region of a scene. The default
:class:`ProceduralRepainter` does this by editing the scene description and
re-rendering, so "repainting" is exact: pixels outside the repainted region
never change.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from refedit.forge.scene import (
    Identity,
    SceneObject,
    SceneSpec,
    fits,
    object_mask,
    random_background,
    random_identity,
    render,
)
from refedit.nk import Rng


@dataclass
class ImageTriplet:
    task_type: str
    original: np.ndarray
    edited: np.ndarray
    reference: np.ndarray | None
    mask: np.ndarray
    reference_mask: np.ndarray | None
    identity: Identity
    source_identity: Identity
    region: str = "center"
    instruction: str = ""
    reference_text: str = ""
    description: str = ""
    scores: dict = field(default_factory=dict)
    edited_object: SceneObject | None = None
    reference_object: SceneObject | None = None

    def __post_init__(self):
        if self.task_type not in ("add", "replace", "remove"):
            raise ValueError(f"bad task type {self.task_type!r}")
        if self.task_type == "remove" and self.reference is not None:
            raise ValueError("remove triplets carry no reference image")
        if self.task_type != "remove" and self.reference is None:
            raise ValueError(f"{self.task_type} triplets need a reference image")


class Repainter(Protocol):
    def repaint_object(self, scene: SceneSpec, index: int, identity: Identity) -> SceneSpec: ...

    def repaint_background(self, scene: SceneSpec, index: int, rng: Rng) -> SceneSpec: ...

    def remove_object(self, scene: SceneSpec, index: int) -> SceneSpec: ...


class ProceduralRepainter:
    """Scene-level repainting; rendering stands in for an inpainting model."""

    def repaint_object(self, scene, index, identity):
        objs = list(scene.objects)
        old = objs[index]
        objs[index] = type(old)(identity, old.cx, old.cy, old.radius)
        return scene.with_objects(objs)

    def repaint_background(self, scene, index, rng):
        # Everything outside the kept object's mask is background, including
        # any other objects.
        return SceneSpec(random_background(rng), [scene.objects[index]], scene.size)

    def remove_object(self, scene, index):
        return scene.with_objects(o for i, o in enumerate(scene.objects) if i != index)


def region_word(obj, size):
    dx = obj.cx - size / 2
    dy = obj.cy - size / 2
    if max(abs(dx), abs(dy)) < size / 8:
        return "center"
    if abs(dx) >= abs(dy):
        return "left" if dx < 0 else "right"
    return "top" if dy < 0 else "bottom"


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    max_rotation_deg: float = 15.0
    scale_range: tuple = (0.9, 1.1)
    max_translate: float = 0.1
    max_retries: int = 3


def _affine_resample(img, mask, flip, angle, scale, tx, ty):
    """Nearest-neighbour inverse mapping about the image centre."""
    h, w = mask.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    c = (w - 1) / 2.0, (h - 1) / 2.0
    u = xs - c[0] - tx
    v = ys - c[1] - ty
    cos, sin = np.cos(angle), np.sin(angle)
    src_x = (cos * u + sin * v) / scale + c[0]
    src_y = (-sin * u + cos * v) / scale + c[1]
    if flip:
        src_x = (w - 1) - src_x
    sx = np.rint(src_x).astype(int)
    sy = np.rint(src_y).astype(int)
    valid = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    sx_c = np.clip(sx, 0, w - 1)
    sy_c = np.clip(sy, 0, h - 1)
    out_mask = mask[sy_c, sx_c] & valid
    out_img = img[sy_c, sx_c]
    return out_img, out_mask


def transform(img, mask, flip=False, angle_deg=0.0, scale=1.0, tx=0.0, ty=0.0):
    """Joint image/mask transform; zero magnitude returns exact copies."""
    if not flip and angle_deg == 0 and scale == 1 and tx == 0 and ty == 0:
        return img.copy(), mask.copy()
    if flip and angle_deg == 0 and scale == 1 and tx == 0 and ty == 0:
        return img[:, ::-1].copy(), mask[:, ::-1].copy()
    return _affine_resample(img, mask, flip, np.deg2rad(angle_deg), scale, tx, ty)


def augment_reference(fg_image, mask, background, rng: Rng, config: AugmentConfig = AugmentConfig()):
    """Flip + small affine applied to the foreground and its mask together.

    The transformed foreground is composited over ``background``. If the
    object leaves the frame, magnitudes are halved and retried; after
    ``max_retries`` the identity transform is used.
    """
    h, w = mask.shape
    flip = bool(rng.random() < config.flip_prob)
    angle = float(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg))
    lo, hi = config.scale_range
    scale = float(rng.uniform(lo, hi))
    tx = float(rng.uniform(-config.max_translate, config.max_translate)) * w
    ty = float(rng.uniform(-config.max_translate, config.max_translate)) * h
    for _ in range(config.max_retries + 1):
        img_t, mask_t = transform(fg_image, mask, flip, angle, scale, tx, ty)
        if mask_t.any():
            break
        angle, scale, tx, ty = angle / 2, 1 + (scale - 1) / 2, tx / 2, ty / 2
    else:
        img_t, mask_t = fg_image.copy(), mask.copy()
    out = background.copy()
    out[mask_t] = img_t[mask_t]
    return out, mask_t


def _reference_view(scene, index, repainter, rng, augment):
    """Object `index` of `scene` on a repainted background, optionally augmented."""
    ref_scene = repainter.repaint_background(scene, index, rng)
    raw = render(ref_scene)
    mask = object_mask(scene.objects[index], scene.size)
    if augment is None:
        return raw, mask
    bg = render(SceneSpec(ref_scene.background, [], scene.size))
    return augment_reference(raw, mask, bg, rng, augment)


def _replacement_identity(scene, index, rng, attempts=20):
    """New identity whose shape still clears the other objects at the same placement."""
    src = scene.objects[index]
    others = [o for i, o in enumerate(scene.objects) if i != index]
    for _ in range(attempts):
        ident = random_identity(rng, exclude=src.identity)
        if fits(SceneObject(ident, src.cx, src.cy, src.radius), others, scene.size):
            return ident
    # Same category keeps the footprint; random_identity never repeats the hue too.
    while True:
        ident = random_identity(rng, exclude=src.identity)
        if ident.category == src.identity.category:
            return ident


def build_replace_triplets(scene: SceneSpec, rng: Rng, index=0, repainter=None, augment=AugmentConfig()):
    """Two mutually-reverse replacement triplets from one source scene.

    ``I_g`` repaints the object region with a new identity. The reference for
    the edit ``I_g -> I_s`` shows the source object on a repainted background,
    and the reference for ``I_s -> I_g`` shows the new object likewise.
    """
    if not scene.objects:
        return []
    repainter = repainter or ProceduralRepainter()
    src_obj = scene.objects[index]
    new_ident = _replacement_identity(scene, index, rng)
    gen_scene_ = repainter.repaint_object(scene, index, new_ident)
    i_s = render(scene)
    i_g = render(gen_scene_)
    m_src = object_mask(src_obj, scene.size)
    m_new = object_mask(gen_scene_.objects[index], scene.size)
    edit_mask = m_src | m_new
    ref_r, ref_r_mask = _reference_view(scene, index, repainter, rng, augment)
    ref_r2, ref_r2_mask = _reference_view(gen_scene_, index, repainter, rng, augment)
    region = region_word(src_obj, scene.size)
    new_obj = gen_scene_.objects[index]
    forward = ImageTriplet(
        "replace", i_g, i_s, ref_r, edit_mask, ref_r_mask, src_obj.identity, new_ident, region,
        edited_object=src_obj, reference_object=src_obj,
    )
    backward = ImageTriplet(
        "replace", i_s, i_g, ref_r2, edit_mask.copy(), ref_r2_mask, new_ident, src_obj.identity, region,
        edited_object=new_obj, reference_object=new_obj,
    )
    return [forward, backward]


def build_add_remove_triplets(scene: SceneSpec, rng: Rng, index=0, repainter=None, augment=AugmentConfig()):
    """(add, remove) pair: the removal image is the scene minus one object."""
    if not scene.objects:
        return []
    repainter = repainter or ProceduralRepainter()
    obj = scene.objects[index]
    removed = render(repainter.remove_object(scene, index))
    original = render(scene)
    m = object_mask(obj, scene.size)
    ref, ref_mask = _reference_view(scene, index, repainter, rng, augment)
    region = region_word(obj, scene.size)
    add = ImageTriplet(
        "add", removed, original, ref, m, ref_mask, obj.identity, obj.identity, region,
        edited_object=obj, reference_object=obj,
    )
    remove = ImageTriplet("remove", original, removed, None, m.copy(), None, obj.identity, obj.identity, region)
    return [add, remove]


def identity_consistent(t: ImageTriplet):
    """The edited object and the reference subject share identity and pixels.

    Checks the generating identities and that the edited image, inside the
    edited object's mask, shows exactly that object as rendered alone.
    """
    if t.reference is None:
        return True
    if t.edited_object is None or t.reference_object is None:
        return False
    if t.edited_object.identity != t.reference_object.identity or t.identity != t.reference_object.identity:
        return False
    size = t.edited.shape[0]
    m = object_mask(t.edited_object, size)
    alone = render(SceneSpec(random_background(Rng(0)), [t.reference_object], size))
    return bool(m.any() and np.array_equal(t.edited[m], alone[m]) and t.reference_mask.any())
