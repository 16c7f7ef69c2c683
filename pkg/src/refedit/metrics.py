"""Evaluation metrics and manifest-level reports.

Pixel metrics work on images scaled to [0, 1]. SIM-I compares the edit to
the original image; SIM-R compares the edit's ground-truth-mask foreground to
the reference foreground. Both are cosine similarities reported x100.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from refedit.embed import cosine, default_embedder
from refedit.forge.manifest import ManifestError, load_image, load_record_images, read_manifest
from refedit.nk import ShapeError

MSE_FLOOR = 1e-10
UNAVAILABLE = ("CLIP-T", "CLIP-IQA", "LPIPS")
TASKS = ("add", "replace", "remove")
REPORT_HEADER = (
    "# SIM-R: masked edit foreground (ground-truth mask) vs masked reference foreground.\n"
    "# SIM-I: whole edit vs whole original. Similarities x100; pixel metrics on [0, 1].\n"
)


def _unit(img):
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def _pair(a, b):
    a, b = _unit(a), _unit(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def l1(a, b, mask=None):
    a, b = _pair(a, b)
    d = np.abs(a - b)
    return float(d.mean() if mask is None else d[np.asarray(mask, bool)].mean())


def l2(a, b, mask=None):
    a, b = _pair(a, b)
    d = (a - b) ** 2
    return float(d.mean() if mask is None else d[np.asarray(mask, bool)].mean())


def psnr(a, b, mask=None):
    """10 log10(1 / MSE), MSE floored so identical images give 100 dB."""
    return float(10.0 * np.log10(1.0 / max(l2(a, b, mask), MSE_FLOOR)))


def embed_similarity(a, b, embedder=None, mask_a=None, mask_b=None):
    embedder = embedder or default_embedder()
    return cosine(embedder.embed(a, mask_a), embedder.embed(b, mask_b))


def item_metrics(result, images, task, embedder=None):
    """Metrics for one produced edit given the record's ground-truth images."""
    gt, orig, mask = images["edited"], images["original"], images["mask"]
    out = {
        "l1": l1(result, gt),
        "l2": l2(result, gt),
        "psnr": psnr(result, gt),
        "sim_i": 100.0 * embed_similarity(result, orig, embedder),
    }
    if images.get("reference") is not None:
        out["sim_r"] = 100.0 * embed_similarity(result, images["reference"], embedder, mask, images["reference_mask"])
    if task == "remove":
        background = ~np.asarray(mask, bool)
        out["bg_psnr"] = psnr(result, gt, background) if background.any() else float("nan")
    return out


@dataclass
class EvalReport:
    items: dict = field(default_factory=dict)
    tasks: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)

    @property
    def count(self):
        return len(self.items)

    def aggregate(self, task=None):
        rows = [m for i, m in self.items.items() if task is None or self.tasks[i] == task]
        keys = sorted({k for m in rows for k in m})
        return {k: float(np.mean([m[k] for m in rows if k in m])) for k in keys}, len(rows)


def evaluate_manifest(results_dir, manifest, embedder=None, root=None):
    """Score ``results_dir/<id>.png`` against every manifest record.

    ``manifest`` is a path or a list of records (then ``root`` locates the
    ground-truth images). Missing results are excluded and listed.
    """
    if isinstance(manifest, (str, Path)):
        root = Path(manifest).parent if root is None else Path(root)
        records = read_manifest(manifest)
    else:
        records = list(manifest)
    if not records:
        raise ValueError("cannot evaluate an empty manifest")
    report = EvalReport()
    for rec in sorted(records, key=lambda r: r["id"]):
        path = Path(results_dir) / f"{rec['id']}.png"
        if not path.exists():
            report.excluded.append(rec["id"])
            continue
        try:
            result = load_image(path)
        except ManifestError:
            report.excluded.append(rec["id"])
            continue
        images = load_record_images(rec, root)
        report.items[rec["id"]] = item_metrics(result, images, rec["task_type"], embedder)
        report.tasks[rec["id"]] = rec["task_type"]
    return report


_COLUMNS = ("l1", "l2", "psnr", "sim_i", "sim_r", "bg_psnr")


def format_report(report: EvalReport):
    lines = [REPORT_HEADER, f"{'group':<8} {'n':>4} " + " ".join(f"{c:>8}" for c in _COLUMNS)]
    groups = [t for t in TASKS if t in report.tasks.values()] + [None]
    for task in groups:
        agg, n = report.aggregate(task)
        if not n:
            continue
        cells = " ".join(f"{agg[c]:8.3f}" if c in agg else f"{'-':>8}" for c in _COLUMNS)
        lines.append(f"{task or 'all':<8} {n:>4} {cells}")
    lines.append(f"excluded: {len(report.excluded)}" + (f" ({', '.join(report.excluded)})" if report.excluded else ""))
    lines.append("unavailable: " + ", ".join(UNAVAILABLE))
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir):
    """``report.txt`` (table) and ``items.jsonl`` (one record per manifest id)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(format_report(report), encoding="utf-8")
    with open(out_dir / "items.jsonl", "w", encoding="utf-8") as fh:
        for item_id in sorted(set(report.items) | set(report.excluded)):
            if item_id in report.items:
                rec = {"id": item_id, "task_type": report.tasks[item_id], "status": "ok"}
                rec.update({k: round(v, 8) for k, v in report.items[item_id].items()})
            else:
                rec = {"id": item_id, "status": "missing"}
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
