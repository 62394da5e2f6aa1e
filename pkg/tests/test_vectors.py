import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layoutspace.errors import DimensionMismatch, EmptySet, ZeroVector
from layoutspace.vectors import (
    DistanceMetric,
    EmbeddingRecord,
    centroid,
    cosine_similarity,
    l2_normalize,
    pairwise_distances,
)

finite_floats = st.floats(min_value=-100, max_value=100, allow_nan=False)


def vec_strategy(min_dim=1, max_dim=8):
    return st.lists(finite_floats, min_size=min_dim, max_size=max_dim)


def test_l2_normalize_345():
    assert np.allclose(l2_normalize([3, 4]), [0.6, 0.8])


def test_l2_normalize_axis():
    assert np.allclose(l2_normalize([0, 7, 0]), [0, 1, 0])


def test_l2_normalize_zero_raises():
    with pytest.raises(ZeroVector):
        l2_normalize([0, 0])


@given(vec_strategy(min_dim=2, max_dim=8))
def test_l2_normalize_unit_norm(v):
    arr = np.array(v)
    if np.linalg.norm(arr) < 1e-6:
        return
    out = l2_normalize(arr)
    assert abs(np.linalg.norm(out) - 1.0) < 1e-12
    # direction preserved
    assert np.dot(out, arr) > 0


def test_cosine_orthogonal():
    assert cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0)


def test_cosine_self_is_one():
    v = [0.3, -2.0, 5.5]
    assert cosine_similarity(v, v) == pytest.approx(1.0)


def test_cosine_45_degrees():
    assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(0.70710678, abs=1e-8)


def test_cosine_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        cosine_similarity([1, 0], [1, 0, 0])


def test_cosine_zero_vector():
    with pytest.raises(ZeroVector):
        cosine_similarity([0, 0], [1, 0])


@given(vec_strategy(min_dim=2, max_dim=6), st.floats(min_value=0.1, max_value=50))
def test_cosine_of_normalized_self(v, scl):
    arr = np.array(v) * scl
    if np.linalg.norm(arr) < 1e-6:
        return
    assert cosine_similarity(arr, l2_normalize(arr)) == pytest.approx(1.0, abs=1e-9)


def test_pairwise_single_record():
    rec = EmbeddingRecord("a", np.array([1.0, 2.0]))
    out = pairwise_distances([rec], DistanceMetric.EUCLIDEAN)
    assert out.shape == (1, 1) and out[0, 0] == 0.0


def test_pairwise_identical_vectors():
    out = pairwise_distances([[1.0, 2.0], [1.0, 2.0]], DistanceMetric.EUCLIDEAN)
    assert np.allclose(out, 0.0)


def test_pairwise_345_triangle():
    out = pairwise_distances([[0.0, 0.0], [3.0, 4.0]], DistanceMetric.EUCLIDEAN)
    assert out[0, 1] == pytest.approx(5.0)
    assert out[1, 0] == pytest.approx(5.0)


def test_pairwise_mixed_dims_raises():
    with pytest.raises(DimensionMismatch):
        pairwise_distances([[1.0, 0.0], [1.0, 0.0, 0.0]], DistanceMetric.EUCLIDEAN)


@settings(max_examples=200)
@given(st.integers(min_value=0, max_value=10_000))
def test_pairwise_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(5, 3))
    dist = pairwise_distances(pts, DistanceMetric.EUCLIDEAN)
    assert np.allclose(dist, dist.T, atol=1e-12)
    assert np.all(np.diag(dist) == 0)
    for i in range(5):
        for j in range(5):
            for k in range(5):
                assert dist[i, j] <= dist[i, k] + dist[k, j] + 1e-9


def test_centroid_single():
    assert np.allclose(centroid([[2.0, 3.0]]), [2.0, 3.0])


def test_centroid_midpoint():
    assert np.allclose(centroid([[0.0, 0.0], [2.0, 0.0]]), [1.0, 0.0])


def test_centroid_mean():
    assert np.allclose(centroid([[1, 1], [3, 3], [5, 5]]), [3.0, 3.0])


def test_centroid_empty_raises():
    with pytest.raises(EmptySet):
        centroid([])


@given(st.integers(min_value=0, max_value=10_000))
def test_centroid_permutation_and_translation(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(6, 4))
    perm = rng.permutation(6)
    shift = rng.normal(size=4)
    assert np.allclose(centroid(pts), centroid(pts[perm]))
    assert np.allclose(centroid(pts + shift), centroid(pts) + shift, atol=1e-12)


def test_record_rejects_nan():
    with pytest.raises(ZeroVector):
        EmbeddingRecord("bad", np.array([1.0, np.nan]))


def test_record_rejects_bad_split():
    with pytest.raises(DimensionMismatch):
        EmbeddingRecord("bad", np.array([1.0]), split_tag="holdout")
