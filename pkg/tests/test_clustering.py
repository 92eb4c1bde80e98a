"""Cosine similarity, soft assignment, and spherical k-means."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from judgecal import (
    CapacityError,
    ClusterModel,
    DimensionError,
    DomainError,
    FormatError,
    fit_spherical_kmeans,
    similarity,
)


def test_similarity_known_values():
    assert similarity([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0)
    assert similarity([2.0, 0.0], [5.0, 0.0]) == pytest.approx(1.0)
    assert similarity([1.0, 0.0], [-3.0, 0.0]) == pytest.approx(-1.0)
    assert similarity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1.0 / np.sqrt(2.0))


@given(
    st.lists(st.floats(-10, 10), min_size=2, max_size=6),
    st.lists(st.floats(-10, 10), min_size=2, max_size=6),
    st.floats(0.01, 100.0),
)
def test_similarity_scale_invariant(a, b, scale):
    n = min(len(a), len(b))
    a, b = np.array(a[:n]), np.array(b[:n])
    if not (np.linalg.norm(a) > 1e-6 and np.linalg.norm(b) > 1e-6):
        return
    base = similarity(a, b)
    assert similarity(scale * a, b) == pytest.approx(base, abs=1e-9)
    assert abs(base) <= 1.0 + 1e-12


def test_similarity_errors():
    with pytest.raises(DomainError):
        similarity([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(DimensionError):
        similarity([1.0, 0.0], [1.0, 0.0, 0.0])
    with pytest.raises(DomainError):
        similarity([np.nan, 1.0], [1.0, 0.0])


def test_soft_assign_matches_direct_softmax():
    centroids = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    model = ClusterModel(centroids=centroids, temperature=0.5)
    x = np.array([3.0, 4.0])
    sims = (x / np.linalg.norm(x)) @ centroids.T
    scores = sims / 0.5
    expected = np.exp(scores - scores.max())
    expected /= expected.sum()
    np.testing.assert_allclose(model.soft_assign(x), expected, atol=1e-12)


def test_soft_assign_rows_are_distributions():
    rng = np.random.default_rng(1)
    model = ClusterModel(centroids=rng.standard_normal((4, 6)))
    probs = model.assign_many(rng.standard_normal((10, 6)))
    assert probs.shape == (10, 4)
    assert np.all(probs >= 0.0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    single = model.soft_assign(rng.standard_normal(6))
    assert single.shape == (4,)


def test_soft_assign_temperature_limits():
    centroids = np.array([[1.0, 0.0], [0.0, 1.0]])
    x = [0.9, 0.1]
    cold = ClusterModel(centroids=centroids, temperature=1e-8).soft_assign(x)
    np.testing.assert_allclose(cold, [1.0, 0.0], atol=1e-12)
    hot = ClusterModel(centroids=centroids, temperature=1e8).soft_assign(x)
    np.testing.assert_allclose(hot, [0.5, 0.5], atol=1e-6)
    even = ClusterModel(centroids=centroids, temperature=0.1).soft_assign([1.0, 1.0])
    np.testing.assert_allclose(even, [0.5, 0.5], atol=1e-12)


def test_cluster_model_normalizes_and_validates():
    model = ClusterModel(centroids=[[3.0, 0.0], [0.0, 0.5]])
    np.testing.assert_allclose(model.centroids, [[1.0, 0.0], [0.0, 1.0]])
    assert model.n_clusters == 2 and model.dim == 2
    with pytest.raises(DomainError):
        ClusterModel(centroids=[[1.0, 0.0]], temperature=0.0)
    with pytest.raises(DimensionError):
        ClusterModel(centroids=[1.0, 0.0])
    with pytest.raises(DimensionError):
        model.assign_many(np.ones((3, 5)))
    with pytest.raises(DomainError):
        model.assign_many(np.full((2, 2), np.nan))


def test_cluster_model_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    model = ClusterModel(centroids=rng.standard_normal((3, 4)), temperature=0.25)
    path = tmp_path / "clusters.json"
    model.save(path)
    loaded = ClusterModel.load(path)
    np.testing.assert_array_equal(loaded.centroids, model.centroids)
    assert loaded.temperature == model.temperature


def test_cluster_model_load_errors(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{broken")
    with pytest.raises(FormatError):
        ClusterModel.load(path)
    path.write_text('{"kind": "other"}')
    with pytest.raises(FormatError):
        ClusterModel.load(path)
    path.write_text(
        '{"kind": "cluster_model", "n_clusters": 5, "dim": 2,'
        ' "temperature": 0.1, "centroids": [[1.0, 0.0]]}'
    )
    with pytest.raises(FormatError):
        ClusterModel.load(path)


def test_kmeans_each_point_its_own_cluster():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 8))
    model = fit_spherical_kmeans(x, k=6, seed=0)
    assert model.objective_ == pytest.approx(0.0, abs=1e-9)


def test_kmeans_recovers_antipodal_blobs():
    rng = np.random.default_rng(3)
    pole = np.zeros(5)
    pole[0] = 1.0
    x = np.concatenate(
        [
            pole + 0.05 * rng.standard_normal((40, 5)),
            -pole + 0.05 * rng.standard_normal((40, 5)),
        ]
    )
    model = fit_spherical_kmeans(x, k=2, seed=0)
    aligned = np.abs(model.centroids @ pole)
    np.testing.assert_array_less(0.99, aligned)
    assert model.centroids[0] @ model.centroids[1] < -0.98


def test_kmeans_history_non_increasing_and_matches_objective():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((200, 5))
    model = fit_spherical_kmeans(x, k=4, seed=11)
    history = np.array(model.history_)
    assert history.size >= 1
    assert np.all(np.diff(history) <= 1e-9)
    assert model.objective_ <= history[-1] + 1e-9
    assert model.objective_ >= 0.0


def test_kmeans_deterministic_per_seed():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((50, 4))
    a = fit_spherical_kmeans(x, k=3, seed=9)
    b = fit_spherical_kmeans(x, k=3, seed=9)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    assert a.objective_ == b.objective_
    assert a.history_ == b.history_


def test_kmeans_input_validation():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((5, 3))
    with pytest.raises(DomainError):
        fit_spherical_kmeans(x, k=0)
    with pytest.raises(CapacityError):
        fit_spherical_kmeans(x, k=6)
    with pytest.raises(DimensionError):
        fit_spherical_kmeans(x[0], k=1)
    with pytest.raises(DomainError):
        fit_spherical_kmeans(x, k=2, n_init=0)
    bad = x.copy()
    bad[0, 0] = np.inf
    with pytest.raises(Exception):
        fit_spherical_kmeans(bad, k=2)


def test_kmeans_handles_duplicate_points():
    x = np.array([[1.0, 0.0]] * 5 + [[0.0, 1.0]] * 5 + [[-1.0, 0.0]] * 5)
    model = fit_spherical_kmeans(x, k=3, seed=0)
    assert model.objective_ == pytest.approx(0.0, abs=1e-9)
    sims = np.sort(model.centroids @ np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).T, axis=0)
    np.testing.assert_allclose(sims[-1], 1.0, atol=1e-9)
