"""End-to-end dataset forging: scenes -> triplets -> instructions -> filter -> files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from refedit.forge.describe import Describer, build_instruction
from refedit.forge.filters import FilterThresholds, apply_filters
from refedit.forge.manifest import save_image, save_mask, write_manifest
from refedit.forge.scene import gen_scene
from refedit.forge.triplets import AugmentConfig, build_add_remove_triplets, build_replace_triplets
from refedit.nk import Rng


@dataclass
class ForgeConfig:
    count: int = 100
    seed: int = 0
    tasks: tuple = ("replace", "add", "remove")
    describer_mode: str = "detailed"
    caption_error_rate: float = 0.03
    augment: bool = True
    thresholds: FilterThresholds = field(default_factory=FilterThresholds)


def scene_seed(master, k):
    return int(Rng(master, stream=k).integers(0, 2**62))


def generate_triplets(config: ForgeConfig):
    """Generate exactly ``config.count`` unfiltered triplets with ids."""
    describer = Describer(config.describer_mode, config.caption_error_rate)
    augment = AugmentConfig() if config.augment else None
    out = []
    k = 0
    while len(out) < config.count:
        scene, _ = gen_scene(scene_seed(config.seed, k))
        rng = Rng(config.seed, stream=k).child(1)
        index = int(rng.integers(len(scene.objects)))
        batch = []
        if "replace" in config.tasks:
            batch += build_replace_triplets(scene, rng, index, augment=augment)
        if "add" in config.tasks or "remove" in config.tasks:
            pair = build_add_remove_triplets(scene, rng, index, augment=augment)
            batch += [t for t in pair if t.task_type in config.tasks]
        for t in batch:
            t.description = describer(t.source_identity, rng)
            t.instruction = build_instruction(t.task_type, t.description, t.region)
            t.reference_text = t.identity.category if t.reference is not None else ""
        for t in batch:
            if len(out) < config.count:
                out.append((f"{len(out):06d}", t))
        k += 1
    return out


def _record(item_id, t, paths):
    return {
        "id": item_id,
        "task_type": t.task_type,
        "original_path": paths["original"],
        "edited_path": paths["edited"],
        "reference_path": paths.get("reference"),
        "mask_path": paths["mask"],
        "reference_mask_path": paths.get("reference_mask"),
        "instruction": t.instruction,
        "reference_text": t.reference_text,
        "description": t.description,
        "region": t.region,
        "identity": t.identity.as_dict(),
        "source_identity": t.source_identity.as_dict(),
        "scores": {k: (None if v is None else round(float(v), 8)) for k, v in t.scores.items()},
    }


def forge_dataset(out_dir, config: ForgeConfig, embedder=None):
    """Write images, masks, ``manifest.jsonl`` and ``stats.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = generate_triplets(config)
    retained = apply_filters([t for _, t in items], embedder, config.thresholds)
    keep_ids = {id(t) for t in retained}
    records = []
    for item_id, t in items:
        if id(t) not in keep_ids:
            continue
        paths = {
            "original": f"images/{item_id}_original.png",
            "edited": f"images/{item_id}_edited.png",
            "mask": f"masks/{item_id}_mask.png",
        }
        save_image(out_dir / paths["original"], t.original)
        save_image(out_dir / paths["edited"], t.edited)
        save_mask(out_dir / paths["mask"], t.mask)
        if t.reference is not None:
            paths["reference"] = f"images/{item_id}_reference.png"
            paths["reference_mask"] = f"masks/{item_id}_refmask.png"
            save_image(out_dir / paths["reference"], t.reference)
            save_mask(out_dir / paths["reference_mask"], t.reference_mask)
        records.append(_record(item_id, t, paths))
    write_manifest(out_dir / "manifest.jsonl", records)
    generated = {}
    kept = {}
    for _, t in items:
        generated[t.task_type] = generated.get(t.task_type, 0) + 1
    for r in records:
        kept[r["task_type"]] = kept.get(r["task_type"], 0) + 1
    stats = {
        "generated": len(items),
        "retained": len(records),
        "retention": (len(records) / len(items)) if items else 1.0,
        "generated_by_task": dict(sorted(generated.items())),
        "retained_by_task": dict(sorted(kept.items())),
    }
    (out_dir / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return records, stats
