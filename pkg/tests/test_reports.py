import json
from pathlib import Path

import numpy as np
import pytest

from slpd_toolkit.analysis.clustering import ClusteringResult, PrototypeSet
from slpd_toolkit.analysis.structure import SlideSimilarityMatrix, top_k_neighbors
from slpd_toolkit.errors import DatasetFileNotFoundError, DimensionMismatchError, FormatError
from slpd_toolkit.io.embedding_store import MANIFEST_NAME, dataset_from_arrays, load_dataset
from slpd_toolkit.io.reports import (
    ASSIGNMENTS_NAME,
    SKIP_LIST_NAME,
    load_similarity_matrix,
    neighbors_payload,
    read_metrics_log,
    region_assignments,
    write_metrics_log,
    write_prototype_dump,
    write_similarity_matrix,
)


def _make_matrix() -> SlideSimilarityMatrix:
    values = np.array([[1.0, 0.25, -0.5], [0.25, 1.0, 0.75], [-0.5, 0.75, 1.0]])
    permutations = np.array(
        [
            [[0, 1], [1, 0], [0, 1]],
            [[1, 0], [0, 1], [0, 1]],
            [[0, 1], [0, 1], [0, 1]],
        ]
    )
    return SlideSimilarityMatrix(slide_ids=("x", "y", "z"), values=values, permutations=permutations)


def _make_set(slide_id: str, value: float) -> PrototypeSet:
    return PrototypeSet(
        slide_id=slide_id,
        prototypes=np.full((2, 3), value),
        assignments=np.array([0, 1, 1]),
        inertia=value * 10,
    )


def test_similarity_matrix_dump_round_trips(tmp_path: Path) -> None:
    matrix = _make_matrix()

    loaded = load_similarity_matrix(write_similarity_matrix(matrix, tmp_path / "similarity.json"))

    assert loaded.slide_ids == matrix.slide_ids
    np.testing.assert_array_equal(loaded.values, matrix.values)
    np.testing.assert_array_equal(loaded.permutations, matrix.permutations)
    payload = json.loads((tmp_path / "similarity.json").read_text(encoding="utf-8"))
    assert payload["format"] == "slpd-similarity"
    assert payload["version"] == 1


def test_load_similarity_matrix_rejects_foreign_or_broken_files(tmp_path: Path) -> None:
    not_json = tmp_path / "broken.json"
    not_json.write_text("{", encoding="utf-8")
    foreign = tmp_path / "foreign.json"
    foreign.write_text(json.dumps({"format": "other"}), encoding="utf-8")
    wrong_shape = tmp_path / "shape.json"
    wrong_shape.write_text(
        json.dumps({"format": "slpd-similarity", "version": 1, "slide_ids": ["a"], "values": [[1, 0]], "permutations": [[[0]]]}),
        encoding="utf-8",
    )
    future = tmp_path / "future.json"
    future.write_text(json.dumps({"format": "slpd-similarity", "version": 7}), encoding="utf-8")

    for path in (not_json, foreign, wrong_shape, future):
        with pytest.raises(FormatError):
            load_similarity_matrix(path)
    with pytest.raises(DatasetFileNotFoundError):
        load_similarity_matrix(tmp_path / "absent.json")


def test_neighbors_payload_is_json_ready() -> None:
    matrix = _make_matrix()

    payload = neighbors_payload({"y": top_k_neighbors(matrix, "y", 2)})

    assert payload == {
        "y": [
            {"slide_id": "z", "similarity": 0.75, "permutation": [0, 1]},
            {"slide_id": "x", "similarity": 0.25, "permutation": [1, 0]},
        ]
    }
    json.dumps(payload)


def test_metrics_log_keeps_record_order(tmp_path: Path) -> None:
    records = [
        {"epoch": 0, "loss_self": 1.5, "compactness": None},
        {"epoch": 1, "loss_self": 1.25, "compactness": 0.5},
    ]

    path = write_metrics_log(records, tmp_path / "logs" / "metrics.jsonl")

    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == '{"epoch": 0, "loss_self": 1.5, "compactness": null}'
    assert read_metrics_log(path) == records


def test_read_metrics_log_rejects_bad_lines(tmp_path: Path) -> None:
    path = tmp_path / "metrics.jsonl"
    path.write_text('{"epoch": 0}\nnot json\n', encoding="utf-8")

    with pytest.raises(FormatError, match=":2:"):
        read_metrics_log(path)
    with pytest.raises(DatasetFileNotFoundError):
        read_metrics_log(tmp_path / "absent.jsonl")


def test_prototype_dump_writes_sets_and_skip_list(tmp_path: Path) -> None:
    result = ClusteringResult(
        prototype_sets={"a": _make_set("a", 1.0), "b": _make_set("b", 2.0)},
        skipped=("tiny",),
    )

    write_prototype_dump(result, tmp_path / "prototypes")

    dumped = load_dataset(tmp_path / "prototypes" / MANIFEST_NAME)
    assert dumped.slide_ids == ("a", "b")
    np.testing.assert_array_equal(dumped.slides[1].features, np.full((2, 3), 2.0))
    skip_list = json.loads((tmp_path / "prototypes" / SKIP_LIST_NAME).read_text(encoding="utf-8"))
    assert skip_list == {"skipped": ["tiny"], "inertia": {"a": 10.0, "b": 20.0}}


def test_prototype_dump_of_a_global_set(tmp_path: Path) -> None:
    result = ClusteringResult(prototype_sets={"a": _make_set("a", 1.0)}, skipped=())
    global_set = _make_set("global", 3.0)

    write_prototype_dump(result, tmp_path, global_set=global_set)

    dumped = load_dataset(tmp_path / MANIFEST_NAME)
    assert dumped.slide_ids == ("global",)
    skip_list = json.loads((tmp_path / SKIP_LIST_NAME).read_text(encoding="utf-8"))
    assert skip_list["inertia"] == {"global": 30.0}


def test_prototype_dump_lists_region_assignments_per_slide(tmp_path: Path) -> None:
    dataset = dataset_from_arrays({"a": np.zeros((3, 3)), "tiny": np.zeros((1, 3)), "b": np.ones((3, 3))})
    result = ClusteringResult(
        prototype_sets={"a": _make_set("a", 1.0), "b": _make_set("b", 2.0)},
        skipped=("tiny",),
    )

    write_prototype_dump(result, tmp_path, dataset=dataset)

    rows = json.loads((tmp_path / ASSIGNMENTS_NAME).read_text(encoding="utf-8"))
    assert rows == [
        {"slide_id": "a", "region_index": 0, "prototype": 0},
        {"slide_id": "a", "region_index": 1, "prototype": 1},
        {"slide_id": "a", "region_index": 2, "prototype": 1},
        {"slide_id": "b", "region_index": 0, "prototype": 0},
        {"slide_id": "b", "region_index": 1, "prototype": 1},
        {"slide_id": "b", "region_index": 2, "prototype": 1},
    ]


def test_global_prototype_dump_has_no_region_assignments(tmp_path: Path) -> None:
    dataset = dataset_from_arrays({"a": np.zeros((3, 3))})
    result = ClusteringResult(prototype_sets={"a": _make_set("a", 1.0)}, skipped=())

    write_prototype_dump(result, tmp_path, global_set=_make_set("global", 3.0), dataset=dataset)

    assert not (tmp_path / ASSIGNMENTS_NAME).exists()


def test_region_assignments_reject_a_region_count_mismatch() -> None:
    dataset = dataset_from_arrays({"a": np.zeros((4, 3))})
    result = ClusteringResult(prototype_sets={"a": _make_set("a", 1.0)}, skipped=())

    with pytest.raises(DimensionMismatchError, match="4 regions but 3 assignments"):
        region_assignments(dataset, result)
