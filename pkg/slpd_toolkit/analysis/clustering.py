"""k-means prototypes for slide-level and global clustering."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Mapping, Sequence
import logging

import numpy as np
from scipy.spatial.distance import cdist

from ..config import KMeansConfig
from ..errors import ClusteringError, NonFiniteValueError, NumericError, ZeroNormError

_LOGGER = logging.getLogger(__name__)

GLOBAL_SLIDE_ID = "__global__"
# Relative slack for the per-iteration inertia check (float rounding only).
_MONOTONE_SLACK = 1e-10


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    """M centroids of one slide (or of the pooled dataset) and the region assignments."""

    slide_id: str
    prototypes: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_trace: tuple[float, ...] = ()

    @property
    def M(self) -> int:
        return int(self.prototypes.shape[0])


@dataclass(frozen=True)
class ClusteringResult:
    """Per-slide prototype sets plus the slides that had fewer than M regions."""

    prototype_sets: dict[str, PrototypeSet]
    skipped: tuple[str, ...]


def kmeans(points: np.ndarray, cfg: KMeansConfig, *, slide_id: str = GLOBAL_SLIDE_ID) -> PrototypeSet:
    """Best-of-restarts Lloyd k-means with k-means++ seeding.

    Restart ``r`` draws from ``SeedSequence(cfg.seed).spawn(...)[r]``, so the
    result is a pure function of the points (in their given order) and the
    config. Prototypes are returned in lexicographic order.

    With ``metric="cosine"`` the assignment search runs on L2-normalised
    points, but the returned prototypes and inertia are means and squared
    distances of the raw points of each cluster; ``inertia_trace`` stays in
    the normalised space.
    """

    raw = _prepare_points(points, "sqeuclidean")
    data = _prepare_points(raw, cfg.metric)
    if data.shape[0] < cfg.M:
        raise ClusteringError(
            f"{slide_id}: {data.shape[0]} points cannot form {cfg.M} prototypes"
        )

    best: tuple[np.ndarray, np.ndarray, float, tuple[float, ...]] | None = None
    for restart, child in enumerate(np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)):
        rng = np.random.default_rng(child)
        initial = _kmeans_plus_plus(data, cfg.M, rng)
        centroids, labels, inertia, trace = _lloyd(data, initial, cfg, slide_id=slide_id)
        _LOGGER.debug(
            "%s restart %d: inertia %.6g after %d iterations", slide_id, restart, inertia, len(trace)
        )
        if best is None or inertia < best[2]:
            best = (centroids, labels, inertia, trace)

    assert best is not None
    means = _cluster_means(raw, best[1], cfg.M) if cfg.metric == "cosine" else best[0]
    centroids, labels = _canonical_order(means, best[1])
    return PrototypeSet(
        slide_id=slide_id,
        prototypes=centroids,
        assignments=labels,
        inertia=_inertia(raw, centroids, labels),
        inertia_trace=best[3],
    )


def slide_level_cluster(
    embeddings: Mapping[str, np.ndarray],
    cfg: KMeansConfig,
    *,
    workers: int = 1,
) -> ClusteringResult:
    """Independent k-means within each slide; slides with fewer than M regions are skipped."""

    eligible: list[str] = []
    skipped: list[str] = []
    for slide_id, points in embeddings.items():
        if len(points) < cfg.M:
            skipped.append(slide_id)
        else:
            eligible.append(slide_id)
    if skipped:
        _LOGGER.warning(
            "%d slide(s) have fewer than M=%d regions and are skipped: %s",
            len(skipped),
            cfg.M,
            ", ".join(skipped),
        )

    def _cluster(slide_id: str) -> PrototypeSet:
        return kmeans(embeddings[slide_id], cfg, slide_id=slide_id)

    if workers > 1 and len(eligible) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            sets = list(pool.map(_cluster, eligible))
    else:
        sets = [_cluster(slide_id) for slide_id in eligible]

    return ClusteringResult(
        prototype_sets=dict(zip(eligible, sets)),
        skipped=tuple(skipped),
    )


def global_cluster(embeddings: np.ndarray, total_prototypes: int, cfg: KMeansConfig) -> PrototypeSet:
    """A single k-means over all pooled region embeddings."""

    return kmeans(embeddings, replace(cfg, M=total_prototypes), slide_id=GLOBAL_SLIDE_ID)


def pool_embeddings(embeddings: Mapping[str, np.ndarray]) -> np.ndarray:
    """Stack per-slide embeddings in mapping order."""

    return np.concatenate([np.asarray(points, dtype=np.float64) for points in embeddings.values()], axis=0)


def assign_to_prototypes(points: np.ndarray, prototypes: np.ndarray, *, metric: str = "sqeuclidean") -> np.ndarray:
    """Index of the nearest prototype for every point (highest cosine when ``metric="cosine"``)."""

    data = _prepare_points(points, metric)
    centers = _prepare_points(prototypes, metric)
    return np.argmin(cdist(data, centers, "sqeuclidean"), axis=1)


# Internal helpers ----------------------------------------------------------
def _prepare_points(points: np.ndarray | Sequence[Sequence[float]], metric: str) -> np.ndarray:
    data = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not np.all(np.isfinite(data)):
        raise NonFiniteValueError("k-means input contains non-finite values")
    if metric == "cosine":
        norms = np.linalg.norm(data, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ZeroNormError("cosine clustering requires non-zero embeddings")
        data = data / norms
    return data


def _kmeans_plus_plus(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n_samples = data.shape[0]
    centers = np.empty((k, data.shape[1]))
    centers[0] = data[rng.integers(n_samples)]
    min_squared = np.sum((data - centers[0]) ** 2, axis=1)

    for i in range(1, k):
        total = float(min_squared.sum())
        if total > 0:
            index = rng.choice(n_samples, p=min_squared / total)
        else:
            index = rng.integers(n_samples)
        centers[i] = data[index]
        min_squared = np.minimum(min_squared, np.sum((data - centers[i]) ** 2, axis=1))

    return centers


def _lloyd(
    data: np.ndarray,
    initial: np.ndarray,
    cfg: KMeansConfig,
    *,
    slide_id: str,
) -> tuple[np.ndarray, np.ndarray, float, tuple[float, ...]]:
    centroids = initial.copy()
    labels = np.zeros(data.shape[0], dtype=np.int64)
    trace: list[float] = []
    previous: float | None = None

    for _ in range(cfg.max_iters):
        labels, centroids = _assign_with_repair(data, centroids)
        centroids = _cluster_means(data, labels, centroids.shape[0])
        inertia = _inertia(data, centroids, labels)
        if previous is not None and inertia > previous + _MONOTONE_SLACK * max(previous, 1.0):
            raise NumericError(
                f"{slide_id}: k-means inertia increased from {previous!r} to {inertia!r}"
            )
        trace.append(inertia)
        converged = previous is not None and (previous - inertia) <= cfg.rel_tol * previous
        previous = inertia
        if converged or inertia == 0.0:
            break

    return centroids, labels, trace[-1], tuple(trace)


def _assign_with_repair(data: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid assignment; an empty cluster takes the farthest movable point."""

    centroids = centroids.copy()
    distances = cdist(data, centroids, "sqeuclidean")
    labels = np.argmin(distances, axis=1)
    own = distances[np.arange(data.shape[0]), labels]
    counts = np.bincount(labels, minlength=centroids.shape[0])

    for empty in np.flatnonzero(counts == 0):
        movable = counts[labels] > 1
        index = int(np.argmax(np.where(movable, own, -1.0)))
        counts[labels[index]] -= 1
        labels[index] = empty
        counts[empty] = 1
        centroids[empty] = data[index]
        own[index] = 0.0

    return labels, centroids


def _cluster_means(data: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    return np.stack([data[labels == j].mean(axis=0) for j in range(k)])


def _inertia(data: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(np.sum((data - centroids[labels]) ** 2))


def _canonical_order(centroids: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # lexsort keys run last-to-first, so the first coordinate is the primary key.
    order = np.lexsort(centroids.T[::-1])
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    return centroids[order], inverse[labels]


__all__ = [
    "GLOBAL_SLIDE_ID",
    "PrototypeSet",
    "ClusteringResult",
    "kmeans",
    "slide_level_cluster",
    "global_cluster",
    "pool_embeddings",
    "assign_to_prototypes",
]
