"""Line-record manifest (one JSON object per line) and image file I/O."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image


class ManifestError(RuntimeError):
    """Unreadable or malformed manifest / image file."""


REQUIRED = ("id", "task_type", "original_path", "edited_path", "mask_path", "instruction")


def write_manifest(path, records):
    path = Path(path)
    records = sorted(records, key=lambda r: r["id"])
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")


def read_manifest(path):
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    records = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{n}: invalid record: {exc}") from exc
        missing = [k for k in REQUIRED if k not in rec]
        if missing:
            raise ManifestError(f"{path}:{n}: record missing fields {missing}")
        records.append(rec)
    return records


def save_image(path, array):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path, format="PNG")


def save_mask(path, mask):
    save_image(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def load_image(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except OSError as exc:
        raise ManifestError(f"cannot read image {path}: {exc}") from exc


def load_mask(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")) > 127
    except OSError as exc:
        raise ManifestError(f"cannot read mask {path}: {exc}") from exc


def resolve(root, rel):
    return None if rel is None else Path(root) / rel


def load_record_images(record, root):
    """Arrays for one record: original, edited, reference|None, mask, reference mask|None."""
    ref = record.get("reference_path")
    refmask = record.get("reference_mask_path")
    return {
        "original": load_image(resolve(root, record["original_path"])),
        "edited": load_image(resolve(root, record["edited_path"])),
        "reference": None if ref is None else load_image(resolve(root, ref)),
        "mask": load_mask(resolve(root, record["mask_path"])),
        "reference_mask": None if refmask is None else load_mask(resolve(root, refmask)),
    }
