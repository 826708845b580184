import json
import struct
from pathlib import Path

import numpy as np
import pytest

from slpd_toolkit.errors import (
    DataError,
    DatasetFileNotFoundError,
    DimensionMismatchError,
    FormatError,
    NonFiniteValueError,
)
from slpd_toolkit.io.embedding_store import (
    MANIFEST_NAME,
    dataset_from_arrays,
    load_dataset,
    read_embedding_file,
    write_dataset,
    write_embedding_file,
)


def _make_dataset(seed: int = 0):
    rng = np.random.default_rng(seed)
    features = {
        "alpha": rng.standard_normal((5, 3)),
        "beta": rng.standard_normal((2, 3)),
        "gamma": rng.standard_normal((7, 3)),
    }
    return dataset_from_arrays(features, labels={"alpha": 0, "beta": 1, "gamma": 1}, num_classes=2)


def test_dataset_round_trip_preserves_ids_labels_and_features(tmp_path: Path) -> None:
    dataset = _make_dataset()

    manifest = write_dataset(dataset, tmp_path / "data")
    loaded = load_dataset(manifest)

    assert manifest.name == MANIFEST_NAME
    assert loaded.slide_ids == ("alpha", "beta", "gamma")
    assert loaded.labels() == (0, 1, 1)
    assert loaded.d_in == 3
    assert loaded.num_classes == 2
    assert loaded.total_regions == 14
    for original, restored in zip(dataset.slides, loaded.slides):
        assert restored.features.dtype == np.float32
        np.testing.assert_array_equal(restored.features, original.features)


def test_load_dataset_accepts_directory_and_parallel_workers(tmp_path: Path) -> None:
    dataset = _make_dataset(seed=3)
    write_dataset(dataset, tmp_path)

    sequential = load_dataset(tmp_path, workers=1)
    parallel = load_dataset(tmp_path, workers=4)

    for left, right in zip(sequential.slides, parallel.slides):
        assert left.slide_id == right.slide_id
        np.testing.assert_array_equal(left.features, right.features)


def test_write_dataset_is_byte_identical_for_identical_input(tmp_path: Path) -> None:
    write_dataset(_make_dataset(), tmp_path / "a")
    write_dataset(_make_dataset(), tmp_path / "b")

    for name in ("manifest.json", "slides/00000.slpd", "slides/00002.slpd"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_embedding_file_header_layout(tmp_path: Path) -> None:
    path = write_embedding_file(tmp_path / "one.slpd", np.arange(6, dtype=np.float64).reshape(2, 3))

    raw = path.read_bytes()

    assert raw[:4] == b"SLPD"
    assert struct.unpack("<III", raw[4:16]) == (1, 2, 3)
    assert len(raw) == 16 + 6 * 4
    np.testing.assert_array_equal(read_embedding_file(path), np.arange(6, dtype=np.float32).reshape(2, 3))


def test_read_embedding_file_rejects_bad_magic(tmp_path: Path) -> None:
    path = write_embedding_file(tmp_path / "x.slpd", np.ones((1, 2)))
    path.write_bytes(b"NOPE" + path.read_bytes()[4:])

    with pytest.raises(FormatError, match="x.slpd"):
        read_embedding_file(path)


def test_read_embedding_file_rejects_unknown_version(tmp_path: Path) -> None:
    path = write_embedding_file(tmp_path / "x.slpd", np.ones((1, 2)))
    raw = path.read_bytes()
    path.write_bytes(raw[:4] + struct.pack("<I", 7) + raw[8:])

    with pytest.raises(FormatError, match="version"):
        read_embedding_file(path)


def test_read_embedding_file_rejects_truncated_payload(tmp_path: Path) -> None:
    path = write_embedding_file(tmp_path / "x.slpd", np.ones((3, 2)))
    path.write_bytes(path.read_bytes()[:-4])

    with pytest.raises(FormatError):
        read_embedding_file(path)


def test_read_embedding_file_checks_expected_dimension(tmp_path: Path) -> None:
    path = write_embedding_file(tmp_path / "x.slpd", np.ones((3, 2)))

    with pytest.raises(DimensionMismatchError):
        read_embedding_file(path, expected_dim=4)


def test_read_embedding_file_rejects_non_finite_values(tmp_path: Path) -> None:
    path = write_embedding_file(tmp_path / "x.slpd", np.array([[1.0, np.nan]]))

    with pytest.raises(NonFiniteValueError):
        read_embedding_file(path)


def test_load_dataset_missing_manifest(tmp_path: Path) -> None:
    with pytest.raises(DatasetFileNotFoundError):
        load_dataset(tmp_path)


def test_load_dataset_missing_slide_file(tmp_path: Path) -> None:
    write_dataset(_make_dataset(), tmp_path)
    (tmp_path / "slides" / "00001.slpd").unlink()

    with pytest.raises(DatasetFileNotFoundError):
        load_dataset(tmp_path)


def test_load_dataset_rejects_foreign_manifest(tmp_path: Path) -> None:
    (tmp_path / MANIFEST_NAME).write_text(json.dumps({"format": "other"}), encoding="utf-8")

    with pytest.raises(FormatError):
        load_dataset(tmp_path)


def test_dataset_rejects_duplicate_ids_and_bad_labels() -> None:
    from slpd_toolkit.io.embedding_store import Slide, SlideDataset

    first = Slide("dup", np.ones((1, 2), dtype=np.float32))
    second = Slide("dup", np.ones((1, 2), dtype=np.float32))
    with pytest.raises(DataError, match="Duplicate"):
        SlideDataset(slides=(first, second), d_in=2)

    with pytest.raises(DataError):
        dataset_from_arrays({"a": np.ones((1, 2))}, labels={"a": 2}, num_classes=2)


def test_dataset_from_arrays_validates_dimensions_and_values() -> None:
    with pytest.raises(DimensionMismatchError):
        dataset_from_arrays({"a": np.ones((2, 3)), "b": np.ones((2, 4))})
    with pytest.raises(NonFiniteValueError):
        dataset_from_arrays({"a": np.array([[np.inf, 0.0]])})
    with pytest.raises(DataError):
        dataset_from_arrays({})


def test_dataset_features_are_read_only_copies() -> None:
    source = np.zeros((2, 2))
    dataset = dataset_from_arrays({"a": source})

    source[0, 0] = 5.0

    assert dataset.slides[0].features[0, 0] == 0.0
    assert not dataset.slides[0].features.flags.writeable
    regions = dataset.slides[0].regions
    assert [region.region_index for region in regions] == [0, 1]
    assert regions[1].slide_id == "a"


def test_slide_index_follows_dataset_order() -> None:
    dataset = _make_dataset()

    assert dataset.slide_index("gamma") == 2
    assert dataset.total_regions == 14
    with pytest.raises(KeyError):
        dataset.slide_index("delta")


@pytest.mark.parametrize(
    "mutate",
    [
        lambda manifest: manifest["slides"][0].pop("path"),
        lambda manifest: manifest["slides"][1].pop("slide_id"),
        lambda manifest: manifest["slides"][0].update(label="one"),
        lambda manifest: manifest["slides"][0].update(path=7),
        lambda manifest: manifest.update(d_in="3"),
        lambda manifest: manifest.update(num_classes=2.5),
        lambda manifest: manifest.update(slides={"alpha": "slides/00000.slpd"}),
        lambda manifest: manifest["slides"].append("slides/00003.slpd"),
    ],
)
def test_load_dataset_rejects_malformed_manifest_entries(tmp_path: Path, mutate) -> None:
    manifest_path = write_dataset(_make_dataset(), tmp_path)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    mutate(manifest)
    manifest_path.write_text(json.dumps(manifest), encoding="utf-8")

    with pytest.raises(FormatError):
        load_dataset(tmp_path)


def test_slide_regions_are_per_region_views_of_the_features() -> None:
    dataset = _make_dataset()
    slide = dataset.slides[2]

    regions = slide.regions

    assert len(regions) == slide.num_regions == 7
    assert all(region.slide_id == "gamma" for region in regions)
    for index, region in enumerate(regions):
        assert region.region_index == index
        np.testing.assert_array_equal(region.features, slide.features[index])
    assert not regions[0].features.flags.writeable
