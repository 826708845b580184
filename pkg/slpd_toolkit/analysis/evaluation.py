"""Embedding quality: KNN slide classification, AUC and prototype compactness."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from itertools import combinations
from typing import Any, Dict, Mapping, Optional, Sequence
import logging

import numpy as np
from scipy.stats import rankdata
from sklearn.model_selection import StratifiedKFold

from ..errors import DataError, DimensionMismatchError, EvaluationError, ZeroNormError
from ..io.embedding_store import SlideDataset, dataset_from_arrays
from ..training.distill import DistillState
from ..training.network import MLPParams, encode
from .clustering import PrototypeSet
from .structure import cosine_matrix

_LOGGER = logging.getLogger(__name__)

NETWORKS = ("teacher", "student")


@dataclass(frozen=True, eq=False)
class KnnPrediction:
    """Predicted labels and the class-1 vote fraction for every test vector."""

    labels: np.ndarray
    scores: np.ndarray


@dataclass(frozen=True)
class EvalReport:
    """Cross-validated KNN metrics plus the optional compactness/separation pair."""

    accuracy: float
    auc: float
    accuracy_std: float
    auc_std: float
    fold_accuracy: tuple[float, ...]
    fold_auc: tuple[float, ...]
    folds: int
    k_eval: int
    compactness: Optional[float] = None
    separation: Optional[float] = None

    def to_mapping(self) -> Dict[str, Any]:
        data = asdict(self)
        data["fold_accuracy"] = list(self.fold_accuracy)
        data["fold_auc"] = list(self.fold_auc)
        return data


# API surface ----------------------------------------------------------------
def embed_dataset(dataset: SlideDataset, encoder: MLPParams) -> dict[str, np.ndarray]:
    """Encoder embeddings of every region, keyed by slide id in dataset order."""

    return {slide.slide_id: encode(encoder, slide.features) for slide in dataset.slides}


def select_encoder(state: DistillState, network: str = "teacher") -> MLPParams:
    if network not in NETWORKS:
        raise EvaluationError(f"network must be one of {', '.join(NETWORKS)} (got {network!r})")
    return state.teacher.encoder if network == "teacher" else state.student.encoder


def mean_pool(embeddings: np.ndarray) -> np.ndarray:
    """Coordinate-wise mean of one slide's region embeddings."""

    array = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if array.shape[0] == 0 or array.size == 0:
        raise DataError("Cannot mean-pool an empty slide")
    return array.mean(axis=0)


def knn_classify(
    train_vectors: np.ndarray,
    train_labels: Sequence[int],
    test_vectors: np.ndarray,
    k_eval: int,
) -> KnnPrediction:
    """Cosine k-nearest-neighbour vote.

    Neighbours are ranked by descending similarity; equal similarities keep
    training order. The majority label wins, ties go to the label with the
    larger summed similarity and then to the lower label.
    """

    train = np.atleast_2d(np.asarray(train_vectors, dtype=np.float64))
    test = np.atleast_2d(np.asarray(test_vectors, dtype=np.float64))
    labels = np.asarray(train_labels, dtype=np.int64)
    if train.shape[0] == 0:
        raise EvaluationError("knn_classify needs at least one training vector")
    if labels.shape != (train.shape[0],):
        raise DimensionMismatchError("train_labels must hold one label per training vector")
    if not 1 <= k_eval <= train.shape[0]:
        raise EvaluationError(f"k_eval must lie in [1, {train.shape[0]}] (got {k_eval})")
    if np.any(labels < 0):
        raise EvaluationError("Labels must be non-negative class indices")

    num_classes = int(labels.max()) + 1
    similarities = cosine_matrix(test, train)
    predicted = np.empty(test.shape[0], dtype=np.int64)
    scores = np.empty(test.shape[0])
    for row, similarity in enumerate(similarities):
        nearest = np.argsort(-similarity, kind="stable")[:k_eval]
        votes = np.bincount(labels[nearest], minlength=num_classes)
        mass = np.bincount(labels[nearest], weights=similarity[nearest], minlength=num_classes)
        tied = np.flatnonzero(votes == votes.max())
        predicted[row] = tied[np.argmax(mass[tied])]
        scores[row] = float(np.count_nonzero(labels[nearest] == 1)) / k_eval
    return KnnPrediction(labels=predicted, scores=scores)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Normalised Mann-Whitney U: P(score+ > score-) + 0.5 * P(tie)."""

    values = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(labels, dtype=np.int64)
    if values.shape != classes.shape:
        raise DimensionMismatchError("scores and labels must have the same length")
    if not np.all(np.isin(classes, (0, 1))):
        raise EvaluationError("AUC needs binary labels in {0, 1}")
    positives = int(np.count_nonzero(classes == 1))
    negatives = classes.size - positives
    if positives == 0 or negatives == 0:
        raise EvaluationError("AUC is undefined when only one class is present")
    ranks = rankdata(values)
    u_statistic = float(np.sum(ranks[classes == 1])) - positives * (positives + 1) / 2.0
    return u_statistic / (positives * negatives)


def cross_validated_eval(
    dataset: SlideDataset,
    state: DistillState,
    folds: int,
    k_eval: int,
    seed: int,
    *,
    network: str = "teacher",
) -> EvalReport:
    """Stratified k-fold KNN over mean-pooled slide embeddings (binary labels)."""

    if folds < 2:
        raise EvaluationError(f"folds must be >= 2 (got {folds})")
    labels = _binary_labels(dataset)
    embeddings = embed_dataset(dataset, select_encoder(state, network))
    vectors = np.stack([mean_pool(embeddings[slide_id]) for slide_id in dataset.slide_ids])

    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    try:
        splits = list(splitter.split(vectors, labels))
    except ValueError as exc:
        raise EvaluationError(f"Cannot build {folds} stratified folds: {exc}") from exc

    fold_accuracy: list[float] = []
    fold_auc: list[float] = []
    for fold, (train_index, test_index) in enumerate(splits):
        for split_name, index in (("training", train_index), ("test", test_index)):
            if np.unique(labels[index]).size < 2:
                raise EvaluationError(f"Fold {fold}: {split_name} split does not contain both classes")
        prediction = knn_classify(vectors[train_index], labels[train_index], vectors[test_index], k_eval)
        fold_accuracy.append(float(np.mean(prediction.labels == labels[test_index])))
        fold_auc.append(auc(prediction.scores, labels[test_index]))
        _LOGGER.debug("Fold %d: accuracy %.4f, AUC %.4f", fold, fold_accuracy[-1], fold_auc[-1])

    report = EvalReport(
        accuracy=float(np.mean(fold_accuracy)),
        auc=float(np.mean(fold_auc)),
        accuracy_std=float(np.std(fold_accuracy)),
        auc_std=float(np.std(fold_auc)),
        fold_accuracy=tuple(fold_accuracy),
        fold_auc=tuple(fold_auc),
        folds=folds,
        k_eval=k_eval,
    )
    _LOGGER.info("KNN evaluation: accuracy %.4f +/- %.4f, AUC %.4f +/- %.4f",
                 report.accuracy, report.accuracy_std, report.auc, report.auc_std)
    return report


def compactness(
    dataset: SlideDataset,
    state: DistillState,
    prototype_sets: Mapping[str, PrototypeSet],
    *,
    network: str = "teacher",
) -> tuple[Optional[float], Optional[float]]:
    """Region-to-prototype cosine distance and class separation of the pooled slide vectors."""

    embeddings = embed_dataset(dataset, select_encoder(state, network))
    return compactness_from_embeddings(embeddings, prototype_sets, dict(zip(dataset.slide_ids, dataset.labels())))


def compactness_from_embeddings(
    embeddings: Mapping[str, np.ndarray],
    prototype_sets: Mapping[str, PrototypeSet],
    labels: Optional[Mapping[str, Optional[int]]] = None,
) -> tuple[Optional[float], Optional[float]]:
    """``(compactness, separation)``; either is ``None`` when it has nothing to average."""

    distances: list[np.ndarray] = []
    for slide_id, prototype_set in prototype_sets.items():
        points = np.atleast_2d(np.asarray(embeddings[slide_id], dtype=np.float64))
        if prototype_set.assignments.shape != (points.shape[0],):
            raise DimensionMismatchError(f"{slide_id}: assignments do not cover every region")
        assigned = prototype_set.prototypes[prototype_set.assignments]
        similarity = np.clip(np.sum(_unit(points) * _unit(assigned), axis=1), -1.0, 1.0)
        distances.append(1.0 - similarity)
    compact = float(np.mean(np.concatenate(distances))) if distances else None

    separation: Optional[float] = None
    if labels is not None:
        labeled = [slide_id for slide_id in embeddings if labels.get(slide_id) is not None]
        separation = _separation(
            np.stack([mean_pool(embeddings[slide_id]) for slide_id in labeled]) if labeled else np.empty((0, 0)),
            [int(labels[slide_id]) for slide_id in labeled],
        )
    return compact, separation


def pooled_vectors_dataset(dataset: SlideDataset, embeddings: Mapping[str, np.ndarray]) -> SlideDataset:
    """One single-region slide per input slide holding its mean-pooled embedding."""

    return dataset_from_arrays(
        {slide_id: mean_pool(embeddings[slide_id])[None, :] for slide_id in dataset.slide_ids},
        labels={slide_id: label for slide_id, label in zip(dataset.slide_ids, dataset.labels()) if label is not None},
        num_classes=dataset.num_classes,
    )


# Internal helpers ----------------------------------------------------------
def _binary_labels(dataset: SlideDataset) -> np.ndarray:
    labels = dataset.labels()
    if any(label is None for label in labels):
        raise EvaluationError("Evaluation needs a label on every slide")
    array = np.asarray(labels, dtype=np.int64)
    if not np.all(np.isin(array, (0, 1))):
        raise EvaluationError("Only binary labels (0/1) are supported")
    if np.unique(array).size < 2:
        raise EvaluationError("Evaluation needs slides of both classes")
    return array


def _separation(vectors: np.ndarray, labels: Sequence[int]) -> Optional[float]:
    inter: list[float] = []
    intra: list[float] = []
    if len(labels) >= 2:
        distances = 1.0 - cosine_matrix(vectors, vectors)
        for i, j in combinations(range(len(labels)), 2):
            (intra if labels[i] == labels[j] else inter).append(float(distances[i, j]))
    if not inter or not intra:
        return None
    return float(np.mean(inter)) - float(np.mean(intra))


def _unit(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNormError("cosine distance is undefined for zero-norm vectors")
    return vectors / norms


__all__ = [
    "KnnPrediction",
    "EvalReport",
    "embed_dataset",
    "select_encoder",
    "mean_pool",
    "knn_classify",
    "auc",
    "cross_validated_eval",
    "compactness",
    "compactness_from_embeddings",
    "pooled_vectors_dataset",
]
