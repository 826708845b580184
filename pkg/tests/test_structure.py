import itertools

import numpy as np
import pytest

from slpd_toolkit.analysis.clustering import PrototypeSet
from slpd_toolkit.analysis.structure import (
    SlideSimilarityMatrix,
    cosine,
    nearest_cross_slide_region,
    nearest_cross_slide_regions,
    optimal_match,
    similarity_matrix,
    top_k_neighbors,
)
from slpd_toolkit.errors import CardinalityMismatchError, ConfigurationError, DataError, ZeroNormError


def _make_set(slide_id: str, prototypes: np.ndarray) -> PrototypeSet:
    prototypes = np.asarray(prototypes, dtype=np.float64)
    return PrototypeSet(
        slide_id=slide_id,
        prototypes=prototypes,
        assignments=np.arange(prototypes.shape[0]),
        inertia=0.0,
    )


def _brute_force_similarity(a: np.ndarray, b: np.ndarray) -> float:
    best = -np.inf
    for permutation in itertools.permutations(range(len(a))):
        total = sum(cosine(a[m], b[permutation[m]]) for m in range(len(a)))
        best = max(best, total / len(a))
    return best


def test_cosine_basic_values_and_zero_norm() -> None:
    assert cosine(np.array([1.0, 0.0]), np.array([2.0, 0.0])) == pytest.approx(1.0)
    assert cosine(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == pytest.approx(0.0)
    assert cosine(np.array([1.0, 1.0]), np.array([-1.0, -1.0])) == pytest.approx(-1.0)
    with pytest.raises(ZeroNormError):
        cosine(np.zeros(2), np.ones(2))


def test_optimal_match_equals_brute_force_over_all_permutations() -> None:
    rng = np.random.default_rng(17)
    for M in range(1, 6):
        for _ in range(200):
            a = rng.standard_normal((M, 4))
            b = rng.standard_normal((M, 4))

            match = optimal_match(_make_set("a", a), _make_set("b", b))

            assert abs(match.similarity - _brute_force_similarity(a, b)) <= 1e-12
            assert sorted(match.permutation.tolist()) == list(range(M))


def test_optimal_match_recovers_a_shuffled_copy() -> None:
    prototypes = np.random.default_rng(2).standard_normal((4, 6))
    order = np.array([2, 0, 3, 1])

    match = optimal_match(_make_set("a", prototypes), _make_set("b", prototypes[order]))

    np.testing.assert_array_equal(order[match.permutation], np.arange(4))
    assert match.similarity == pytest.approx(1.0, abs=1e-12)


def test_set_similarity_invariants_on_random_pairs() -> None:
    rng = np.random.default_rng(99)
    for _ in range(500):
        M = int(rng.integers(1, 5))
        a = rng.standard_normal((M, 3))
        b = rng.standard_normal((M, 3))
        scale = rng.uniform(0.1, 10.0, size=(M, 1))

        forward = optimal_match(_make_set("a", a), _make_set("b", b)).similarity
        backward = optimal_match(_make_set("b", b), _make_set("a", a)).similarity
        rescaled = optimal_match(_make_set("a", a * scale), _make_set("b", b)).similarity
        self_similarity = optimal_match(_make_set("a", a), _make_set("a", a)).similarity

        assert abs(forward - backward) <= 1e-9
        assert -1.0 <= forward <= 1.0
        assert abs(self_similarity - 1.0) <= 1e-6
        assert abs(rescaled - forward) <= 1e-9


def test_optimal_match_rejects_different_cardinalities() -> None:
    with pytest.raises(CardinalityMismatchError):
        optimal_match(_make_set("a", np.ones((2, 2))), _make_set("b", np.ones((3, 2))))


def test_similarity_matrix_is_symmetric_with_inverse_permutations() -> None:
    rng = np.random.default_rng(7)
    sets = [_make_set(f"s{index}", rng.standard_normal((3, 4))) for index in range(5)]

    matrix = similarity_matrix(sets, workers=1)

    np.testing.assert_array_equal(np.diag(matrix.values), np.ones(5))
    np.testing.assert_allclose(matrix.values, matrix.values.T, atol=1e-12)
    for i in range(5):
        np.testing.assert_array_equal(matrix.permutations[i, i], np.arange(3))
        for j in range(5):
            np.testing.assert_array_equal(matrix.permutations[j, i][matrix.permutations[i, j]], np.arange(3))
            if i != j:
                expected = optimal_match(sets[i], sets[j]).similarity
                assert matrix.values[i, j] == pytest.approx(expected, abs=1e-12)


def test_similarity_matrix_parallel_matches_sequential() -> None:
    rng = np.random.default_rng(12)
    sets = [_make_set(f"s{index}", rng.standard_normal((2, 3))) for index in range(6)]

    sequential = similarity_matrix(sets, workers=1)
    parallel = similarity_matrix(sets, workers=4)

    np.testing.assert_array_equal(sequential.values, parallel.values)
    np.testing.assert_array_equal(sequential.permutations, parallel.permutations)


def test_similarity_matrix_lists_offending_slides() -> None:
    sets = [_make_set("ok", np.ones((2, 2))), _make_set("odd", np.ones((3, 2)))]

    with pytest.raises(CardinalityMismatchError, match="odd"):
        similarity_matrix(sets)


def _make_matrix(values: np.ndarray) -> SlideSimilarityMatrix:
    count = values.shape[0]
    return SlideSimilarityMatrix(
        slide_ids=tuple("dcba"[:count]),
        values=values,
        permutations=np.zeros((count, count, 1), dtype=np.int64),
    )


def test_top_k_neighbors_orders_by_similarity_then_slide_id() -> None:
    values = np.array(
        [
            [1.0, 0.5, 0.9, 0.5],
            [0.5, 1.0, 0.1, 0.2],
            [0.9, 0.1, 1.0, 0.3],
            [0.5, 0.2, 0.3, 1.0],
        ]
    )
    matrix = _make_matrix(values)

    neighbors = top_k_neighbors(matrix, "d", 3)

    # "c" and "a" tie at 0.5; "a" sorts first.
    assert [item.slide_id for item in neighbors] == ["b", "a", "c"]
    assert neighbors[0].similarity == pytest.approx(0.9)


def test_top_k_neighbors_rejects_out_of_range_k() -> None:
    matrix = _make_matrix(np.eye(3))

    with pytest.raises(ConfigurationError):
        top_k_neighbors(matrix, "d", 0)
    with pytest.raises(ConfigurationError):
        top_k_neighbors(matrix, "d", 3)


def test_two_identical_slides_are_each_others_neighbor() -> None:
    prototypes = np.random.default_rng(1).standard_normal((2, 3))
    matrix = similarity_matrix([_make_set("x", prototypes), _make_set("y", prototypes.copy())])

    (neighbor,) = top_k_neighbors(matrix, "x", 1)

    assert neighbor.slide_id == "y"
    assert neighbor.similarity == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(neighbor.permutation, [0, 1])


def test_nearest_cross_slide_region_skips_own_slide_and_keeps_first_maximum() -> None:
    embeddings = {
        "own": np.array([[1.0, 0.0]]),
        "b": np.array([[0.0, 1.0], [2.0, 0.0]]),
        "c": np.array([[3.0, 0.0]]),
    }

    match = nearest_cross_slide_region(np.array([1.0, 0.0]), embeddings, exclude="own")

    assert (match.slide_id, match.region_index) == ("b", 1)
    assert match.cosine == pytest.approx(1.0)


def test_nearest_cross_slide_region_needs_candidates() -> None:
    with pytest.raises(DataError):
        nearest_cross_slide_region(np.ones(2), {"own": np.ones((2, 2))}, exclude="own")


def test_batch_nearest_regions_agree_with_single_queries() -> None:
    rng = np.random.default_rng(21)
    embeddings = {f"s{index}": rng.standard_normal((4, 3)) for index in range(4)}

    batch = nearest_cross_slide_regions(embeddings)

    for slide_id, points in embeddings.items():
        for region, point in enumerate(points):
            single = nearest_cross_slide_region(point, embeddings, exclude=slide_id)
            assert batch[slide_id][region].slide_id == single.slide_id
            assert batch[slide_id][region].region_index == single.region_index
            assert batch[slide_id][region].cosine == pytest.approx(single.cosine, abs=1e-12)


def test_batch_nearest_regions_need_two_slides() -> None:
    with pytest.raises(DataError):
        nearest_cross_slide_regions({"only": np.ones((3, 2))})
