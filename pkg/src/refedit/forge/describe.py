"""Object descriptions (recaptioning port) and instruction templates."""

from __future__ import annotations

from refedit.forge.scene import CATEGORIES, HUES, TEXTURES, Identity
from refedit.nk import Rng

REGION_WORDS = ("left", "right", "top", "bottom", "center")
TEMPLATE_WORDS = ("replace", "the", "with", "add", "to", "remove")
PLACEHOLDER = "S*"


class Describer:
    """Word-table describer standing in for an MLLM captioner.

    ``detailed`` mode yields "{hue} {texture} {category}"; ``category-only``
    yields just the category. ``error_rate`` swaps the hue word for a wrong one
    with that probability, modelling captioner hallucination so the text
    filter has something to catch.
    """

    def __init__(self, mode="detailed", error_rate=0.0):
        if mode not in ("detailed", "category-only"):
            raise ValueError(f"unknown describer mode {mode!r}")
        self.mode = mode
        self.error_rate = error_rate

    def __call__(self, identity: Identity, rng: Rng | None = None):
        return describe_object(identity, self.mode, rng=rng, error_rate=self.error_rate)


def describe_object(identity: Identity, mode="detailed", rng=None, error_rate=0.0):
    if mode == "category-only":
        return identity.category
    hue = identity.hue
    if error_rate > 0 and rng is not None and rng.random() < error_rate:
        others = [h for h in HUES if h != hue]
        hue = others[int(rng.integers(len(others)))]
    return f"{hue} {identity.texture} {identity.category}"


def text_agreement(description: str, identity: Identity):
    """Fraction of description words that match the ground-truth identity."""
    words = description.split()
    truth = {identity.hue, identity.texture, identity.category}
    if not words:
        return 0.0
    return sum(w in truth for w in words) / len(words)


def build_instruction(task_type, description, region="center"):
    if task_type == "replace":
        return f"replace the {description} with {PLACEHOLDER}"
    if task_type == "add":
        return f"add {PLACEHOLDER} to the {region}"
    if task_type == "remove":
        return f"remove the {description}"
    raise ValueError(f"bad task type {task_type!r}")


def vocabulary_words():
    """Every word the templates and describer can emit, in a fixed order."""
    words = list(TEMPLATE_WORDS) + list(REGION_WORDS) + list(HUES) + list(TEXTURES) + list(CATEGORIES)
    seen = []
    for w in words:
        if w not in seen:
            seen.append(w)
    return seen
