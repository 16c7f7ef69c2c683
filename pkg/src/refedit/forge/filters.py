"""Three-score quality filter for generated triplets.

* ``s_pp``: similarity of original and edited image. Too high means the edit
  barely changed anything.
* ``s_er``: similarity of the edited foreground and the reference foreground.
  Too low means the edit drifted from the reference.
* ``s_txt``: agreement of the instruction's description with the true
  identity of the object being edited.

Cut-offs are given as percentiles of the score distribution being filtered
(plus an absolute floor for ``s_txt``) and resolved per call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from refedit.embed import cosine, default_embedder
from refedit.forge.describe import text_agreement


@dataclass(frozen=True)
class FilterThresholds:
    pp_percentile: float = 96.0
    er_percentile: float = 4.0
    txt_floor: float = 0.99

    @classmethod
    def pass_all(cls):
        return cls(100.0, 0.0, 0.0)


def score_triplet(triplet, embedder=None):
    embedder = embedder or default_embedder()
    s_pp = cosine(embedder.embed(triplet.original), embedder.embed(triplet.edited))
    s_er = None
    if triplet.reference is not None:
        s_er = cosine(
            embedder.embed(triplet.edited, triplet.mask),
            embedder.embed(triplet.reference, triplet.reference_mask),
        )
    s_txt = text_agreement(triplet.description, triplet.source_identity)
    return {"s_pp": s_pp, "s_er": s_er, "s_txt": s_txt}


def resolve_cutoffs(scores, thresholds: FilterThresholds):
    pp = np.array([s["s_pp"] for s in scores], dtype=np.float64)
    er = np.array([s["s_er"] for s in scores if s["s_er"] is not None], dtype=np.float64)
    pp_cut = float(np.percentile(pp, thresholds.pp_percentile)) if pp.size else np.inf
    er_cut = float(np.percentile(er, thresholds.er_percentile)) if er.size else -np.inf
    if thresholds.pp_percentile >= 100:
        pp_cut = np.inf
    if thresholds.er_percentile <= 0:
        er_cut = -np.inf
    return pp_cut, er_cut


def keep(score, pp_cut, er_cut, txt_floor):
    if score["s_pp"] > pp_cut:
        return False
    if np.isfinite(pp_cut) and score["s_pp"] >= 1.0 - 1e-9:
        return False
    if score["s_er"] is not None and score["s_er"] < er_cut:
        return False
    return score["s_txt"] >= txt_floor


def apply_filters(triplets, embedder=None, thresholds=FilterThresholds()):
    """Score every triplet, then keep those inside all three cut-offs.

    Scores are attached to each triplet (``triplet.scores``) whether it is
    kept or not. Returns the retained triplets in input order.
    """
    embedder = embedder or default_embedder()
    scores = [score_triplet(t, embedder) for t in triplets]
    for t, s in zip(triplets, scores):
        t.scores = s
    if not triplets:
        return []
    pp_cut, er_cut = resolve_cutoffs(scores, thresholds)
    return [t for t, s in zip(triplets, scores) if keep(s, pp_cut, er_cut, thresholds.txt_floor)]
