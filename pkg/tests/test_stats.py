import numpy as np
import pytest

from oracles import silhouette_oracle
from xtransfer.errors import DegenerateClusteringError, EmptyInputError, ShapeError
from xtransfer.stats import cluster_stats, inter_distance, centroids, mmc, mmc_shift, silhouette


def test_mmc_basics():
    assert np.array_equal(mmc(np.zeros((2, 3, 4, 4))), np.zeros((2, 3)))
    x = np.array([1.0, -1.0, 3.0, -3.0]).reshape(1, 1, 2, 2)
    assert mmc(x)[0, 0] == 2.0
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4, 5, 6))
    perm = rng.permutation(30)
    b = a.reshape(3, 4, 30)[:, :, perm].reshape(3, 4, 5, 6)
    assert np.allclose(mmc(a), mmc(b), atol=1e-15)
    assert np.allclose(mmc(2.5 * a), 2.5 * mmc(a), rtol=1e-15)
    with pytest.raises(EmptyInputError):
        mmc(np.zeros((0, 3, 2, 2)))


def test_silhouette_separated_and_overlapping():
    rng = np.random.default_rng(1)
    a = rng.normal(scale=1e-3, size=(10, 2))
    x = np.vstack([a, a + 10])
    y = np.repeat([0, 1], 10)
    assert silhouette(x, y)[0] > 0.9
    z = rng.normal(size=(200, 2))
    yy = np.tile([0, 1], 100)
    s = silhouette(z, yy)[0]
    assert abs(s - silhouette_oracle(z, yy)) < 1e-9
    assert abs(s) < 0.1


def test_silhouette_single_class():
    with pytest.raises(DegenerateClusteringError):
        silhouette(np.zeros((3, 2)), [1, 1, 1])


def test_silhouette_singletons_score_zero():
    x = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0]])
    s, per = silhouette(x, [0, 0, 1])
    assert per[1] == 0.0
    assert abs(s - silhouette_oracle(x, [0, 0, 1])) < 1e-12


def test_per_class_average_matches_total():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(37, 3))
    y = rng.integers(0, 4, size=37)
    s, per = silhouette(x, y)
    w = {c: np.sum(y == c) for c in per}
    assert abs(sum(per[c] * w[c] for c in per) / len(y) - s) < 1e-12


def test_cluster_stats_hand_values():
    st = cluster_stats(np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 3.0]]), [0, 1, 2])
    assert st.inter_d == pytest.approx(4.0, abs=1e-12)
    assert all(v == 0 for v in st.intra_d.values())


def test_cluster_stats_rigid_invariance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(30, 2))
    y = np.repeat([0, 1, 2], 10)
    th = 0.7
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    a = cluster_stats(x, y)
    b = cluster_stats(x @ rot.T + np.array([3.0, -2.0]), y)
    assert abs(a.inter_d - b.inter_d) < 1e-9
    for c in a.intra_d:
        assert abs(a.intra_d[c] - b.intra_d[c]) < 1e-9
    assert abs(a.s_score - b.s_score) < 1e-9


def test_mmc_shift():
    rng = np.random.default_rng(4)
    s = np.abs(rng.normal(size=(10, 5))) + 0.1
    assert mmc_shift(s, s) == 0.0
    t = np.tile(2 * s.mean(axis=0), (7, 1))
    assert mmc_shift(s, t) == pytest.approx(1.0, abs=1e-12)
    assert mmc_shift(s, s[::-1]) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ShapeError):
        mmc_shift(s, s[:, :3])


def test_inter_distance_needs_two():
    with pytest.raises(DegenerateClusteringError):
        inter_distance(centroids(np.zeros((2, 2)), [0, 0]))
