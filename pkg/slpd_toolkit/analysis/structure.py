"""Inter-slide semantic structure: prototype matching, slide similarity and neighbours."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Sequence
import logging

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..errors import CardinalityMismatchError, ConfigurationError, DataError, ZeroNormError
from .clustering import PrototypeSet

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MatchResult:
    """Optimal one-to-one matching between two prototype sets.

    ``permutation[m]`` is the prototype of the second set matched to prototype
    ``m`` of the first; ``similarity`` is the mean matched cosine.
    """

    permutation: np.ndarray
    similarity: float


@dataclass(frozen=True, eq=False)
class SlideSimilarityMatrix:
    """Symmetric N x N slide similarities with the optimal permutations in both directions."""

    slide_ids: tuple[str, ...]
    values: np.ndarray
    permutations: np.ndarray

    def index(self, slide_id: str) -> int:
        try:
            return self.slide_ids.index(slide_id)
        except ValueError as exc:
            raise KeyError(slide_id) from exc


@dataclass(frozen=True, eq=False)
class Neighbor:
    """A similar slide and the permutation from the query's prototypes to its prototypes."""

    slide_id: str
    similarity: float
    permutation: np.ndarray


@dataclass(frozen=True)
class RegionMatch:
    """Nearest region embedding found in another slide."""

    slide_id: str
    region_index: int
    cosine: float


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity of two non-zero vectors, clipped to [-1, 1]."""

    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    norm_u = float(np.linalg.norm(u))
    norm_v = float(np.linalg.norm(v))
    if norm_u == 0.0 or norm_v == 0.0:
        raise ZeroNormError("cosine similarity is undefined for zero-norm vectors")
    return float(np.clip(np.dot(u, v) / (norm_u * norm_v), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""

    return np.clip(_unit_rows(a) @ _unit_rows(b).T, -1.0, 1.0)


def optimal_match(a: PrototypeSet, b: PrototypeSet) -> MatchResult:
    """Hungarian matching that maximises the mean cosine between matched prototypes."""

    if a.M != b.M:
        raise CardinalityMismatchError(
            f"Cannot match {a.slide_id!r} (M={a.M}) with {b.slide_id!r} (M={b.M})"
        )
    similarities = cosine_matrix(a.prototypes, b.prototypes)
    rows, cols = linear_sum_assignment(-similarities)
    permutation = np.empty(a.M, dtype=np.int64)
    permutation[rows] = cols
    similarity = float(np.sum(similarities[np.arange(a.M), permutation])) / a.M
    return MatchResult(permutation=permutation, similarity=similarity)


def similarity_matrix(sets: Sequence[PrototypeSet], *, workers: int = 1) -> SlideSimilarityMatrix:
    """All pairwise slide similarities; the upper triangle is computed and mirrored."""

    if not sets:
        raise DataError("similarity_matrix needs at least one prototype set")
    reference_M = sets[0].M
    offending = [prototype_set.slide_id for prototype_set in sets if prototype_set.M != reference_M]
    if offending:
        raise CardinalityMismatchError(
            f"Prototype sets must share M={reference_M}; offending slides: {', '.join(offending)}"
        )

    count = len(sets)
    values = np.eye(count)
    permutations = np.empty((count, count, reference_M), dtype=np.int64)
    permutations[np.arange(count), np.arange(count)] = np.arange(reference_M)

    pairs = list(combinations(range(count), 2))

    def _match(pair: tuple[int, int]) -> MatchResult:
        return optimal_match(sets[pair[0]], sets[pair[1]])

    if workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            matches = list(pool.map(_match, pairs))
    else:
        matches = [_match(pair) for pair in pairs]

    for (i, j), match in zip(pairs, matches):
        values[i, j] = values[j, i] = match.similarity
        permutations[i, j] = match.permutation
        permutations[j, i] = np.argsort(match.permutation)

    _LOGGER.debug("Computed %d prototype matchings for %d slides", len(pairs), count)
    return SlideSimilarityMatrix(
        slide_ids=tuple(prototype_set.slide_id for prototype_set in sets),
        values=values,
        permutations=permutations,
    )


def top_k_neighbors(matrix: SlideSimilarityMatrix, slide_id: str, K: int) -> list[Neighbor]:
    """The K most similar other slides, ties broken by ascending slide id."""

    count = len(matrix.slide_ids)
    if not 1 <= K <= count - 1:
        raise ConfigurationError(f"K must lie in [1, {count - 1}] for {count} slides (got {K})")
    query = matrix.index(slide_id)
    candidates = [index for index in range(count) if index != query]
    candidates.sort(key=lambda index: (-matrix.values[query, index], matrix.slide_ids[index]))
    return [
        Neighbor(
            slide_id=matrix.slide_ids[index],
            similarity=float(matrix.values[query, index]),
            permutation=matrix.permutations[query, index],
        )
        for index in candidates[:K]
    ]


def nearest_cross_slide_region(
    z: np.ndarray,
    embeddings: Mapping[str, np.ndarray],
    *,
    exclude: str | None = None,
) -> RegionMatch:
    """Region with the highest cosine to ``z`` outside slide ``exclude``.

    Candidates are scanned in mapping order then region order; the first
    maximum wins.
    """

    query = _unit_rows(np.asarray(z, dtype=np.float64)[None, :])[0]
    best: RegionMatch | None = None
    for slide_id, points in embeddings.items():
        if slide_id == exclude or len(points) == 0:
            continue
        scores = np.clip(_unit_rows(points) @ query, -1.0, 1.0)
        index = int(np.argmax(scores))
        if best is None or scores[index] > best.cosine:
            best = RegionMatch(slide_id=slide_id, region_index=index, cosine=float(scores[index]))
    if best is None:
        raise DataError("No regions outside the query slide to match against")
    return best


def nearest_cross_slide_regions(embeddings: Mapping[str, np.ndarray]) -> dict[str, list[RegionMatch]]:
    """``nearest_cross_slide_region`` for every region of every slide at once."""

    slide_ids = list(embeddings)
    if len(slide_ids) < 2:
        raise DataError("Cross-slide region matching needs at least two slides")
    units = [_unit_rows(embeddings[slide_id]) for slide_id in slide_ids]
    pooled = np.concatenate(units, axis=0)
    owner = np.concatenate([np.full(len(unit), index) for index, unit in enumerate(units)])
    offsets = np.concatenate([[0], np.cumsum([len(unit) for unit in units])])

    matches: dict[str, list[RegionMatch]] = {}
    for index, slide_id in enumerate(slide_ids):
        scores = np.clip(units[index] @ pooled.T, -1.0, 1.0)
        scores[:, owner == index] = -np.inf
        best = np.argmax(scores, axis=1)
        matches[slide_id] = [
            RegionMatch(
                slide_id=slide_ids[owner[flat]],
                region_index=int(flat - offsets[owner[flat]]),
                cosine=float(scores[row, flat]),
            )
            for row, flat in enumerate(best)
        ]
    return matches


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    array = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    norms = np.linalg.norm(array, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNormError("cosine similarity is undefined for zero-norm vectors")
    return array / norms


__all__ = [
    "MatchResult",
    "SlideSimilarityMatrix",
    "Neighbor",
    "RegionMatch",
    "cosine",
    "cosine_matrix",
    "optimal_match",
    "similarity_matrix",
    "top_k_neighbors",
    "nearest_cross_slide_region",
    "nearest_cross_slide_regions",
]
