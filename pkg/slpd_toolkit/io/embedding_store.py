"""Slide embedding datasets: in-memory types and the on-disk format.

A dataset directory holds ``manifest.json`` plus one binary file per slide.
Each binary file is::

    b"SLPD" | u32 version (=1) | u32 num_regions | u32 dim | float32[num_regions * dim]

with every integer and float little-endian and the payload row-major.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence
import json
import logging
import struct

import numpy as np

from ..errors import (
    DataError,
    DatasetFileNotFoundError,
    DimensionMismatchError,
    FormatError,
    NonFiniteValueError,
)

_LOGGER = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
EMBEDDING_MAGIC = b"SLPD"
EMBEDDING_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_PAYLOAD_DTYPE = np.dtype("<f4")
_MANIFEST_FORMAT = "slpd-manifest"
_MANIFEST_VERSION = 1


@dataclass(frozen=True, eq=False)
class RegionRecord:
    """One region of a slide; ``Slide.regions`` yields these in region order."""

    features: np.ndarray
    slide_id: str
    region_index: int


@dataclass(frozen=True, eq=False)
class Slide:
    """A bag of region feature vectors with an optional class label."""

    slide_id: str
    features: np.ndarray
    label: Optional[int] = None

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise DataError(f"Slide {self.slide_id!r} must hold a non-empty 2-D feature array")
        self.features.setflags(write=False)

    @property
    def num_regions(self) -> int:
        return int(self.features.shape[0])

    @property
    def regions(self) -> tuple[RegionRecord, ...]:
        return tuple(
            RegionRecord(features=row, slide_id=self.slide_id, region_index=index)
            for index, row in enumerate(self.features)
        )


@dataclass(frozen=True, eq=False)
class SlideDataset:
    """N slides sharing the feature dimension ``d_in``."""

    slides: tuple[Slide, ...]
    d_in: int
    num_classes: Optional[int] = None

    def __post_init__(self) -> None:
        if self.d_in < 1:
            raise DataError("d_in must be positive")
        seen: set[str] = set()
        for slide in self.slides:
            if slide.slide_id in seen:
                raise DataError(f"Duplicate slide id: {slide.slide_id!r}")
            seen.add(slide.slide_id)
            if slide.features.shape[1] != self.d_in:
                raise DimensionMismatchError(
                    f"Slide {slide.slide_id!r} has dimension {slide.features.shape[1]}, expected {self.d_in}"
                )
            if not np.all(np.isfinite(slide.features)):
                raise NonFiniteValueError(f"Slide {slide.slide_id!r} contains non-finite values")
            if slide.label is not None:
                if self.num_classes is None:
                    raise DataError("Labelled slides require num_classes")
                if not 0 <= slide.label < self.num_classes:
                    raise DataError(
                        f"Slide {slide.slide_id!r} label {slide.label} outside [0, {self.num_classes})"
                    )

    @property
    def slide_ids(self) -> tuple[str, ...]:
        return tuple(slide.slide_id for slide in self.slides)

    @property
    def total_regions(self) -> int:
        return sum(slide.num_regions for slide in self.slides)

    def labels(self) -> tuple[Optional[int], ...]:
        return tuple(slide.label for slide in self.slides)

    def slide_index(self, slide_id: str) -> int:
        for index, slide in enumerate(self.slides):
            if slide.slide_id == slide_id:
                return index
        raise KeyError(slide_id)


def dataset_from_arrays(
    features_by_slide: Mapping[str, np.ndarray],
    labels: Optional[Mapping[str, int]] = None,
    num_classes: Optional[int] = None,
) -> SlideDataset:
    """Build a dataset from ``slide_id -> (L_n, d_in)`` arrays, stored as float32."""

    if not features_by_slide:
        raise DataError("A dataset needs at least one slide")
    slides = []
    for slide_id, features in features_by_slide.items():
        array = np.array(np.atleast_2d(features), dtype=np.float32, copy=True)
        label = None if labels is None or slide_id not in labels else int(labels[slide_id])
        slides.append(Slide(slide_id=str(slide_id), features=array, label=label))
    dims = {slide.features.shape[1] for slide in slides}
    if len(dims) != 1:
        raise DimensionMismatchError(f"Slides have inconsistent dimensions: {sorted(dims)}")
    return SlideDataset(slides=tuple(slides), d_in=dims.pop(), num_classes=num_classes)


# Binary files -------------------------------------------------------------
def write_embedding_file(path: Path, features: np.ndarray) -> Path:
    """Write one ``(num_regions, dim)`` array in the SLPD binary format."""

    array = np.atleast_2d(np.asarray(features))
    header = _HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, array.shape[0], array.shape[1])
    path.write_bytes(header + np.ascontiguousarray(array, dtype=_PAYLOAD_DTYPE).tobytes())
    return path


def read_embedding_file(path: Path, *, expected_dim: Optional[int] = None) -> np.ndarray:
    """Read one SLPD binary file into a read-only float32 array."""

    if not path.exists():
        raise DatasetFileNotFoundError(f"Embedding file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, num_regions, dim = _HEADER.unpack_from(raw)
    if magic != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic bytes {magic!r} (expected {EMBEDDING_MAGIC!r})")
    if version != EMBEDDING_VERSION:
        raise FormatError(f"{path}: unsupported version {version} (expected {EMBEDDING_VERSION})")
    if expected_dim is not None and dim != expected_dim:
        raise DimensionMismatchError(f"{path}: dimension {dim} does not match dataset d_in {expected_dim}")
    expected_bytes = _HEADER.size + num_regions * dim * _PAYLOAD_DTYPE.itemsize
    if len(raw) != expected_bytes:
        raise FormatError(f"{path}: payload holds {len(raw)} bytes, expected {expected_bytes}")
    array = np.frombuffer(raw, dtype=_PAYLOAD_DTYPE, offset=_HEADER.size).reshape(num_regions, dim)
    if not np.all(np.isfinite(array)):
        raise NonFiniteValueError(f"{path}: contains non-finite values")
    return array.astype(np.float32)


# Datasets -----------------------------------------------------------------
def write_dataset(dataset: SlideDataset, directory: Path) -> Path:
    """Write the manifest and per-slide files; returns the manifest path."""

    directory = Path(directory)
    slide_dir = directory / "slides"
    slide_dir.mkdir(parents=True, exist_ok=True)

    entries: list[dict[str, Any]] = []
    for index, slide in enumerate(dataset.slides):
        relative = Path("slides") / f"{index:05d}.slpd"
        write_embedding_file(directory / relative, slide.features)
        entry: dict[str, Any] = {"slide_id": slide.slide_id, "path": relative.as_posix()}
        if slide.label is not None:
            entry["label"] = slide.label
        entries.append(entry)

    manifest: dict[str, Any] = {
        "format": _MANIFEST_FORMAT,
        "version": _MANIFEST_VERSION,
        "d_in": dataset.d_in,
    }
    if dataset.num_classes is not None:
        manifest["num_classes"] = dataset.num_classes
    manifest["slides"] = entries

    manifest_path = directory / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    _LOGGER.info("Wrote %d slides to %s", len(entries), directory)
    return manifest_path


def load_dataset(manifest_path: Path, *, workers: int = 1) -> SlideDataset:
    """Load a dataset from its manifest (or the directory containing it)."""

    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetFileNotFoundError(f"Manifest not found: {manifest_path}")

    manifest = _read_manifest(manifest_path)
    root = manifest_path.parent
    d_in: int = manifest["d_in"]
    entries: Sequence[Mapping[str, Any]] = manifest["slides"]

    def _load(entry: Mapping[str, Any]) -> np.ndarray:
        return read_embedding_file(root / entry["path"], expected_dim=d_in)

    if workers > 1 and len(entries) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            arrays = list(pool.map(_load, entries))
    else:
        arrays = [_load(entry) for entry in entries]

    slides = tuple(
        Slide(slide_id=entry["slide_id"], features=array, label=entry["label"]) for entry, array in zip(entries, arrays)
    )
    dataset = SlideDataset(slides=slides, d_in=d_in, num_classes=manifest["num_classes"])
    _LOGGER.debug("Loaded %d slides (%d regions) from %s", len(slides), dataset.total_regions, root)
    return dataset


def _read_manifest(path: Path) -> dict[str, Any]:
    """Parse and validate a manifest; every field comes back with its final type."""

    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: manifest is not valid JSON ({exc})") from exc
    if not isinstance(manifest, Mapping) or manifest.get("format") != _MANIFEST_FORMAT:
        raise FormatError(f"{path}: not an SLPD manifest")
    if manifest.get("version") != _MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
    for key in ("d_in", "slides"):
        if key not in manifest:
            raise FormatError(f"{path}: manifest is missing {key!r}")
    slides = manifest["slides"]
    if not isinstance(slides, list):
        raise FormatError(f"{path}: 'slides' must be a list")
    if not slides:
        raise DataError(f"{path}: manifest lists no slides")

    entries = []
    for number, entry in enumerate(slides):
        where = f"{path}: slide entry {number}"
        if not isinstance(entry, Mapping):
            raise FormatError(f"{where} must be an object")
        for key in ("slide_id", "path"):
            if not isinstance(entry.get(key), str):
                raise FormatError(f"{where} needs a string {key!r}")
        label = entry.get("label")
        entries.append(
            {
                "slide_id": entry["slide_id"],
                "path": entry["path"],
                "label": None if label is None else _manifest_int(label, f"{where} label"),
            }
        )
    num_classes = manifest.get("num_classes")
    return {
        "d_in": _manifest_int(manifest["d_in"], f"{path}: d_in"),
        "num_classes": None if num_classes is None else _manifest_int(num_classes, f"{path}: num_classes"),
        "slides": entries,
    }


def _manifest_int(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise FormatError(f"{where} must be an integer, got {value!r}")
    return value


__all__ = [
    "RegionRecord",
    "Slide",
    "SlideDataset",
    "dataset_from_arrays",
    "load_dataset",
    "read_embedding_file",
    "write_dataset",
    "write_embedding_file",
]
