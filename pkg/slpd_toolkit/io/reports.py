"""JSON and JSON-lines artifacts: prototype dumps, similarity matrices, metrics and reports."""
from __future__ import annotations

from pathlib import Path
from typing import Any, Iterable, Mapping, Optional
import json
import logging

import numpy as np

from ..analysis.clustering import ClusteringResult, PrototypeSet
from ..analysis.structure import Neighbor, SlideSimilarityMatrix
from ..errors import DatasetFileNotFoundError, DimensionMismatchError, FormatError
from .embedding_store import SlideDataset, dataset_from_arrays, write_dataset

_LOGGER = logging.getLogger(__name__)

SKIP_LIST_NAME = "skip_list.json"
ASSIGNMENTS_NAME = "assignments.json"
_SIMILARITY_FORMAT = "slpd-similarity"
_SIMILARITY_VERSION = 1


def write_json(path: Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def write_prototype_dump(
    result: ClusteringResult,
    directory: Path,
    *,
    global_set: Optional[PrototypeSet] = None,
    dataset: Optional[SlideDataset] = None,
) -> Path:
    """Prototype sets as a dataset (one slide per set) plus ``skip_list.json``.

    With ``dataset`` and no ``global_set`` the per-region assignments go to
    ``assignments.json`` as well.
    """

    directory = Path(directory)
    sets = {global_set.slide_id: global_set} if global_set is not None else result.prototype_sets
    if sets:
        write_dataset(dataset_from_arrays({slide_id: item.prototypes for slide_id, item in sets.items()}), directory)
    else:
        _LOGGER.warning("No prototype sets to write; only %s is produced", SKIP_LIST_NAME)
    if dataset is not None and global_set is None:
        write_json(directory / ASSIGNMENTS_NAME, region_assignments(dataset, result))
    return write_json(
        directory / SKIP_LIST_NAME,
        {
            "skipped": list(result.skipped),
            "inertia": {slide_id: item.inertia for slide_id, item in sets.items()},
        },
    )


def region_assignments(dataset: SlideDataset, result: ClusteringResult) -> list[dict[str, Any]]:
    """One row per region of every clustered slide: slide id, region index and prototype index."""

    rows = []
    for slide in dataset.slides:
        item = result.prototype_sets.get(slide.slide_id)
        if item is None:
            continue
        if item.assignments.shape[0] != slide.num_regions:
            raise DimensionMismatchError(
                f"Slide {slide.slide_id!r} has {slide.num_regions} regions but {item.assignments.shape[0]} assignments"
            )
        rows.extend(
            {
                "slide_id": region.slide_id,
                "region_index": region.region_index,
                "prototype": int(item.assignments[region.region_index]),
            }
            for region in slide.regions
        )
    return rows


def write_similarity_matrix(matrix: SlideSimilarityMatrix, path: Path) -> Path:
    payload = {
        "format": _SIMILARITY_FORMAT,
        "version": _SIMILARITY_VERSION,
        "slide_ids": list(matrix.slide_ids),
        "values": matrix.values.tolist(),
        "permutations": matrix.permutations.tolist(),
    }
    _LOGGER.info("Writing %dx%d similarity matrix to %s", len(matrix.slide_ids), len(matrix.slide_ids), path)
    return write_json(path, payload)


def load_similarity_matrix(path: Path) -> SlideSimilarityMatrix:
    path = Path(path)
    if not path.exists():
        raise DatasetFileNotFoundError(f"Similarity matrix not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(payload, Mapping) or payload.get("format") != _SIMILARITY_FORMAT:
        raise FormatError(f"{path}: not a similarity matrix dump")
    if payload.get("version") != _SIMILARITY_VERSION:
        raise FormatError(f"{path}: unsupported similarity matrix version {payload.get('version')!r}")
    try:
        slide_ids = tuple(str(slide_id) for slide_id in payload["slide_ids"])
        values = np.asarray(payload["values"], dtype=np.float64)
        permutations = np.asarray(payload["permutations"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed similarity matrix ({exc})") from exc
    count = len(slide_ids)
    if values.shape != (count, count) or permutations.ndim != 3 or permutations.shape[:2] != (count, count):
        raise FormatError(f"{path}: similarity matrix shapes do not match {count} slides")
    return SlideSimilarityMatrix(slide_ids=slide_ids, values=values, permutations=permutations)


def neighbors_payload(neighbors: Mapping[str, list[Neighbor]]) -> dict[str, list[dict[str, Any]]]:
    return {
        slide_id: [
            {"slide_id": item.slide_id, "similarity": item.similarity, "permutation": item.permutation.tolist()}
            for item in items
        ]
        for slide_id, items in neighbors.items()
    }


def write_metrics_log(records: Iterable[Mapping[str, Any]], path: Path) -> Path:
    """One JSON object per line, keys in record order."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(dict(record)) for record in records]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    _LOGGER.info("Wrote %d metrics records to %s", len(lines), path)
    return path


def read_metrics_log(path: Path) -> list[dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise DatasetFileNotFoundError(f"Metrics log not found: {path}")
    records = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{number}: invalid metrics record ({exc})") from exc
    return records


__all__ = [
    "ASSIGNMENTS_NAME",
    "SKIP_LIST_NAME",
    "write_json",
    "write_prototype_dump",
    "region_assignments",
    "write_similarity_matrix",
    "load_similarity_matrix",
    "neighbors_payload",
    "write_metrics_log",
    "read_metrics_log",
]
