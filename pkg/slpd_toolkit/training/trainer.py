"""The SLPD epoch loop: per-epoch artifacts, minibatch optimisation and the training driver."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional
import logging
import math
import time

import numpy as np

from ..analysis.clustering import (
    ClusteringResult,
    PrototypeSet,
    global_cluster,
    pool_embeddings,
    slide_level_cluster,
)
from ..analysis.evaluation import compactness_from_embeddings, embed_dataset, select_encoder
from ..analysis.structure import (
    Neighbor,
    RegionMatch,
    SlideSimilarityMatrix,
    nearest_cross_slide_regions,
    similarity_matrix,
    top_k_neighbors,
)
from ..config import TrainConfig
from ..errors import DataError, NumericError
from ..io.checkpoint import write_checkpoint
from ..io.embedding_store import SlideDataset
from ..io.reports import write_metrics_log
from .distill import (
    DistillState,
    Minibatch,
    ema_update,
    init_state,
    loss_and_gradients,
    sgd_step,
    update_center,
    update_prototype_center,
)

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EpochArtifacts:
    """Everything frozen for one epoch: embeddings, prototypes, structure and per-region targets.

    Target arrays are indexed by the flat region index (slides in dataset
    order, regions in slide order); masks mark the regions that carry a target.
    """

    epoch: int
    embeddings: Dict[str, np.ndarray]
    clustering: ClusteringResult
    global_set: Optional[PrototypeSet]
    similarity: Optional[SlideSimilarityMatrix]
    neighbors: Dict[str, list[Neighbor]]
    region_matches: Optional[Dict[str, list[RegionMatch]]]
    skip_list: tuple[str, ...]
    effective_K: int
    intra_targets: Optional[np.ndarray]
    intra_mask: Optional[np.ndarray]
    inter_targets: Optional[np.ndarray]
    inter_mask: Optional[np.ndarray]
    compactness: Optional[float]
    separation: Optional[float]


@dataclass(frozen=True)
class EpochMetrics:
    """Running means over the minibatches of one epoch."""

    loss_self: float
    loss_intra: float
    loss_inter: float
    loss_total: float
    teacher_entropy: float
    batches: int


@dataclass
class TrainingStreams:
    """Independent generators for initialisation, batch sampling and augmentation."""

    init: np.random.Generator
    shuffle: np.random.Generator
    augment: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "TrainingStreams":
        init, shuffle, augment = (np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(3))
        return cls(init=init, shuffle=shuffle, augment=augment)


@dataclass(frozen=True, eq=False)
class TrainResult:
    state: DistillState
    metrics: list[Dict[str, Any]]


# API surface ----------------------------------------------------------------
def augment(x: np.ndarray, rng: np.random.Generator, sigma: float, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Two views of ``x`` (one vector or a batch): Gaussian noise, then coordinate dropout.

    Draw order is fixed (view 1 noise, view 1 mask, view 2 noise, view 2
    mask) so a seeded generator reproduces the pair.
    """

    if sigma < 0:
        raise DataError("sigma must be >= 0")
    if not 0.0 <= p < 1.0:
        raise DataError("dropout probability must lie in [0, 1)")
    array = np.asarray(x, dtype=np.float64)
    views = []
    for _ in range(2):
        noise = rng.normal(0.0, sigma, size=array.shape)
        keep = rng.random(array.shape) >= p
        views.append(np.where(keep, array + noise, 0.0))
    return views[0], views[1]


def build_epoch_artifacts(
    dataset: SlideDataset,
    state: DistillState,
    cfg: TrainConfig,
    *,
    epoch: int = 0,
    workers: int = 1,
) -> EpochArtifacts:
    """Embed, cluster, match and look up neighbours once, before the epoch's first batch."""

    slide_count = len(dataset.slides)
    if cfg.inter_mode == "prototype" and slide_count - 1 < cfg.K:
        raise DataError(f"K={cfg.K} neighbours need at least {cfg.K + 1} slides (dataset has {slide_count})")
    if cfg.inter_mode == "region" and slide_count < 2:
        raise DataError("Region-level inter-slide targets need at least two slides")

    embeddings = embed_dataset(dataset, select_encoder(state, cfg.clustering_source))
    kmeans_cfg = cfg.kmeans_config(epoch=epoch)
    clustering = slide_level_cluster(embeddings, kmeans_cfg, workers=workers)
    skip_list = clustering.skipped
    skipped = set(skip_list)

    kept = {slide_id: points for slide_id, points in embeddings.items() if slide_id not in skipped}

    global_set: Optional[PrototypeSet] = None
    if cfg.intra_mode == "global" and kept:
        pooled = pool_embeddings(kept)
        total = min(len(kept) * cfg.M, pooled.shape[0])
        global_set = global_cluster(pooled, total, kmeans_cfg)

    similarity: Optional[SlideSimilarityMatrix] = None
    neighbors: Dict[str, list[Neighbor]] = {}
    effective_K = 0
    if cfg.inter_mode == "prototype":
        eligible = list(clustering.prototype_sets)
        effective_K = min(cfg.K, len(eligible) - 1)
        if effective_K < cfg.K:
            _LOGGER.warning(
                "Only %d slide(s) carry prototypes; using K=%d instead of %d", len(eligible), max(effective_K, 0), cfg.K
            )
        if effective_K >= 1:
            similarity = similarity_matrix(list(clustering.prototype_sets.values()), workers=workers)
            neighbors = {slide_id: top_k_neighbors(similarity, slide_id, effective_K) for slide_id in eligible}
        effective_K = max(effective_K, 0)

    region_matches: Optional[Dict[str, list[RegionMatch]]] = None
    if cfg.inter_mode == "region":
        if len(kept) >= 2:
            region_matches = nearest_cross_slide_regions(kept)
        else:
            _LOGGER.warning("Only %d slide(s) carry prototypes; region-level inter targets are disabled", len(kept))
            region_matches = {}

    intra_targets, intra_mask = _intra_targets(dataset, clustering, global_set, embeddings, cfg)
    inter_targets, inter_mask = _inter_targets(dataset, clustering, neighbors, region_matches, embeddings, cfg, effective_K)

    compact, separation = compactness_from_embeddings(
        embeddings, clustering.prototype_sets, dict(zip(dataset.slide_ids, dataset.labels()))
    )
    _LOGGER.debug("Epoch %d artifacts: %d prototype sets, %d skipped", epoch, len(clustering.prototype_sets), len(skip_list))
    return EpochArtifacts(
        epoch=epoch,
        embeddings=embeddings,
        clustering=clustering,
        global_set=global_set,
        similarity=similarity,
        neighbors=neighbors,
        region_matches=region_matches,
        skip_list=skip_list,
        effective_K=effective_K,
        intra_targets=intra_targets,
        intra_mask=intra_mask,
        inter_targets=inter_targets,
        inter_mask=inter_mask,
        compactness=compact,
        separation=separation,
    )


def sample_batches(dataset: SlideDataset, cfg: TrainConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Flat region indices of every minibatch of one epoch."""

    total = dataset.total_regions
    if cfg.sampling == "uniform":
        order = rng.permutation(total)
    else:
        counts = np.array([slide.num_regions for slide in dataset.slides])
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slides = rng.integers(len(counts), size=total)
        regions = np.floor(rng.random(total) * counts[slides]).astype(np.int64)
        order = offsets[slides] + regions
    return [order[start:start + cfg.batch_size] for start in range(0, total, cfg.batch_size)]


def run_epoch(
    dataset: SlideDataset,
    state: DistillState,
    artifacts: EpochArtifacts,
    cfg: TrainConfig,
    streams: TrainingStreams,
) -> tuple[DistillState, EpochMetrics]:
    """One pass of minibatch optimisation against fixed epoch artifacts."""

    features = np.concatenate([slide.features for slide in dataset.slides], axis=0).astype(np.float64)
    totals: Dict[str, list[float]] = {key: [] for key in ("self", "intra", "inter", "total", "entropy")}

    for index in sample_batches(dataset, cfg, streams.shuffle):
        view1, view2 = augment(features[index], streams.augment, cfg.augment_noise_sigma, cfg.augment_dropout_p)
        batch = Minibatch(
            view1=view1,
            view2=view2,
            intra_prototypes=None if artifacts.intra_targets is None else artifacts.intra_targets[index],
            intra_mask=None if artifacts.intra_mask is None else artifacts.intra_mask[index],
            inter_prototypes=None if artifacts.inter_targets is None else artifacts.inter_targets[index],
            inter_mask=None if artifacts.inter_mask is None else artifacts.inter_mask[index],
        )
        evaluation = loss_and_gradients(state, cfg.weights, batch)
        if not math.isfinite(evaluation.total):
            raise NumericError(f"Epoch {artifacts.epoch}: loss became non-finite ({evaluation.total!r})")
        assert evaluation.gradients is not None
        student, velocity = sgd_step(state.student, evaluation.gradients, cfg.lr, cfg.lr_momentum, state.velocity)
        state = replace(state, student=student, velocity=velocity)
        state = ema_update(state, state.ema_momentum)
        state = update_center(state, evaluation.teacher_logits)
        if evaluation.prototype_logits is not None:
            state = update_prototype_center(state, evaluation.prototype_logits)

        totals["self"].append(evaluation.components.self_distill)
        totals["intra"].append(evaluation.components.intra)
        totals["inter"].append(evaluation.components.inter)
        totals["total"].append(evaluation.total)
        totals["entropy"].append(evaluation.teacher_entropy)

    metrics = EpochMetrics(
        loss_self=float(np.mean(totals["self"])),
        loss_intra=float(np.mean(totals["intra"])),
        loss_inter=float(np.mean(totals["inter"])),
        loss_total=float(np.mean(totals["total"])),
        teacher_entropy=float(np.mean(totals["entropy"])),
        batches=len(totals["total"]),
    )
    return state, metrics


def train(
    dataset: SlideDataset,
    cfg: TrainConfig,
    *,
    workers: int = 1,
    checkpoint_path: Optional[Path] = None,
    metrics_path: Optional[Path] = None,
    on_epoch: Optional[Callable[[EpochArtifacts, EpochMetrics], None]] = None,
) -> TrainResult:
    """Initialise from ``cfg.seed`` and run ``cfg.epochs`` epochs; output depends only on the inputs."""

    streams = TrainingStreams.from_seed(cfg.seed)
    state = init_state(cfg.model, dataset.d_in, streams.init)
    records: list[Dict[str, Any]] = []

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        artifacts = build_epoch_artifacts(dataset, state, cfg, epoch=epoch, workers=workers)
        state, metrics = run_epoch(dataset, state, artifacts, cfg, streams)
        record: Dict[str, Any] = {
            "epoch": epoch,
            "loss_self": metrics.loss_self,
            "loss_intra": metrics.loss_intra,
            "loss_inter": metrics.loss_inter,
            "loss_total": metrics.loss_total,
            "compactness": artifacts.compactness,
            "teacher_entropy": metrics.teacher_entropy,
            "skipped_slides": len(artifacts.skip_list),
        }
        if cfg.record_wall_time:
            record["wall_time"] = time.perf_counter() - started
        records.append(record)
        _LOGGER.info(
            "Epoch %d/%d: total %.5f (self %.5f, intra %.5f, inter %.5f), entropy %.4f",
            epoch + 1,
            cfg.epochs,
            metrics.loss_total,
            metrics.loss_self,
            metrics.loss_intra,
            metrics.loss_inter,
            metrics.teacher_entropy,
        )
        if on_epoch is not None:
            on_epoch(artifacts, metrics)

    if checkpoint_path is not None:
        write_checkpoint(state, checkpoint_path)
    if metrics_path is not None:
        write_metrics_log(records, metrics_path)
    return TrainResult(state=state, metrics=records)


# Internal helpers ----------------------------------------------------------
def _flat_offsets(dataset: SlideDataset) -> dict[str, int]:
    offsets: dict[str, int] = {}
    cursor = 0
    for slide in dataset.slides:
        offsets[slide.slide_id] = cursor
        cursor += slide.num_regions
    return offsets


def _intra_targets(
    dataset: SlideDataset,
    clustering: ClusteringResult,
    global_set: Optional[PrototypeSet],
    embeddings: Dict[str, np.ndarray],
    cfg: TrainConfig,
) -> tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    if cfg.intra_mode == "off":
        return None, None
    embed_dim = next(iter(embeddings.values())).shape[1]
    targets = np.zeros((dataset.total_regions, embed_dim))
    mask = np.zeros(dataset.total_regions, dtype=bool)
    offsets = _flat_offsets(dataset)

    if cfg.intra_mode == "slide":
        for slide_id, prototype_set in clustering.prototype_sets.items():
            rows = slice(offsets[slide_id], offsets[slide_id] + prototype_set.assignments.size)
            targets[rows] = prototype_set.prototypes[prototype_set.assignments]
            mask[rows] = True
    elif global_set is not None:
        cursor = 0
        # The global set was fitted on the non-skipped slides in dataset order.
        for slide in dataset.slides:
            if slide.slide_id not in clustering.prototype_sets:
                continue
            labels = global_set.assignments[cursor:cursor + slide.num_regions]
            rows = slice(offsets[slide.slide_id], offsets[slide.slide_id] + slide.num_regions)
            targets[rows] = global_set.prototypes[labels]
            mask[rows] = True
            cursor += slide.num_regions
    return targets, mask


def _inter_targets(
    dataset: SlideDataset,
    clustering: ClusteringResult,
    neighbors: Dict[str, list[Neighbor]],
    region_matches: Optional[Dict[str, list[RegionMatch]]],
    embeddings: Dict[str, np.ndarray],
    cfg: TrainConfig,
    effective_K: int,
) -> tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    if cfg.inter_mode == "off":
        return None, None
    embed_dim = next(iter(embeddings.values())).shape[1]
    offsets = _flat_offsets(dataset)

    if cfg.inter_mode == "region":
        assert region_matches is not None
        targets = np.zeros((dataset.total_regions, 1, embed_dim))
        mask = np.zeros(dataset.total_regions, dtype=bool)
        for slide_id, matches in region_matches.items():
            if slide_id in clustering.skipped:
                continue
            start = offsets[slide_id]
            for region, match in enumerate(matches):
                targets[start + region, 0] = embeddings[match.slide_id][match.region_index]
            mask[start:start + len(matches)] = True
        return targets, mask

    if effective_K < 1:
        return None, None
    targets = np.zeros((dataset.total_regions, effective_K, embed_dim))
    mask = np.zeros(dataset.total_regions, dtype=bool)
    sets = clustering.prototype_sets
    for slide_id, prototype_set in sets.items():
        start = offsets[slide_id]
        rows = slice(start, start + prototype_set.assignments.size)
        for k, neighbor in enumerate(neighbors[slide_id]):
            matched = sets[neighbor.slide_id].prototypes[neighbor.permutation]
            targets[rows, k] = matched[prototype_set.assignments]
        mask[rows] = True
    return targets, mask


__all__ = [
    "EpochArtifacts",
    "EpochMetrics",
    "TrainingStreams",
    "TrainResult",
    "augment",
    "build_epoch_artifacts",
    "sample_batches",
    "run_epoch",
    "train",
]
