"""Labelled synthetic slide datasets for desk-scale experiments."""
from __future__ import annotations

import logging

import numpy as np

from ..config import SyntheticConfig
from ..io.embedding_store import SlideDataset, dataset_from_arrays

_LOGGER = logging.getLogger(__name__)

# Spread of the dataset-wide pattern means, per-slide jitter of those means,
# and the isotropic noise of individual regions around their blob mean.
_PATTERN_SCALE = 3.0
_SLIDE_JITTER = 1.0
_REGION_NOISE = 1.0


def generate_synthetic(
    num_slides: int,
    regions_per_slide: int,
    d_in: int,
    num_classes: int,
    class_separation: float,
    within_slide_clusters: int,
    seed: int,
) -> SlideDataset:
    """Draw a labelled dataset of Gaussian-blob slides.

    Every slide mixes ``within_slide_clusters`` blobs. The blob means are
    dataset-wide patterns plus a per-slide jitter, shifted by
    ``class_separation`` along a unit direction specific to the slide's class.
    Labels are assigned round-robin. The random stream does not depend on the
    labels, so ``class_separation=0`` gives identical class-conditional
    distributions.
    """

    cfg = SyntheticConfig(
        num_slides=num_slides,
        regions_per_slide=regions_per_slide,
        d_in=d_in,
        num_classes=num_classes,
        class_separation=class_separation,
        within_slide_clusters=within_slide_clusters,
        seed=seed,
    )
    rng = np.random.default_rng(cfg.seed)

    directions = rng.standard_normal((cfg.num_classes, cfg.d_in))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    patterns = rng.standard_normal((cfg.within_slide_clusters, cfg.d_in)) * _PATTERN_SCALE

    features: dict[str, np.ndarray] = {}
    labels: dict[str, int] = {}
    blob_of_region = np.arange(cfg.regions_per_slide) % cfg.within_slide_clusters
    for index in range(cfg.num_slides):
        slide_id = f"slide-{index:04d}"
        label = index % cfg.num_classes
        jitter = rng.standard_normal((cfg.within_slide_clusters, cfg.d_in)) * _SLIDE_JITTER
        means = patterns + jitter + cfg.class_separation * directions[label]
        order = rng.permutation(cfg.regions_per_slide)
        noise = rng.standard_normal((cfg.regions_per_slide, cfg.d_in)) * _REGION_NOISE
        features[slide_id] = means[blob_of_region[order]] + noise
        labels[slide_id] = label

    _LOGGER.info(
        "Generated %d synthetic slides (L=%d, d_in=%d, separation=%.3g)",
        cfg.num_slides,
        cfg.regions_per_slide,
        cfg.d_in,
        cfg.class_separation,
    )
    return dataset_from_arrays(features, labels=labels, num_classes=cfg.num_classes)


def generate_from_config(cfg: SyntheticConfig) -> SlideDataset:
    return generate_synthetic(
        num_slides=cfg.num_slides,
        regions_per_slide=cfg.regions_per_slide,
        d_in=cfg.d_in,
        num_classes=cfg.num_classes,
        class_separation=cfg.class_separation,
        within_slide_clusters=cfg.within_slide_clusters,
        seed=cfg.seed,
    )
