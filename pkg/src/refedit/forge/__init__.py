"""Synthetic reference-editing dataset construction."""

from refedit.forge.describe import Describer, build_instruction, describe_object, text_agreement, vocabulary_words
from refedit.forge.filters import FilterThresholds, apply_filters, score_triplet
from refedit.forge.manifest import ManifestError, load_record_images, read_manifest, write_manifest
from refedit.forge.pipeline import ForgeConfig, forge_dataset, generate_triplets
from refedit.forge.scene import CATEGORIES, HUES, TEXTURES, Identity, SceneSpec, gen_scene, render
from refedit.forge.triplets import (
    AugmentConfig,
    ImageTriplet,
    ProceduralRepainter,
    augment_reference,
    build_add_remove_triplets,
    build_replace_triplets,
    identity_consistent,
    transform,
)

__all__ = [
    "CATEGORIES",
    "HUES",
    "TEXTURES",
    "AugmentConfig",
    "Describer",
    "FilterThresholds",
    "ForgeConfig",
    "Identity",
    "ImageTriplet",
    "ManifestError",
    "ProceduralRepainter",
    "SceneSpec",
    "apply_filters",
    "augment_reference",
    "build_add_remove_triplets",
    "build_instruction",
    "build_replace_triplets",
    "describe_object",
    "forge_dataset",
    "gen_scene",
    "identity_consistent",
    "generate_triplets",
    "load_record_images",
    "read_manifest",
    "render",
    "score_triplet",
    "text_agreement",
    "transform",
    "vocabulary_words",
    "write_manifest",
]
