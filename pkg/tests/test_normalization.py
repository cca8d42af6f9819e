import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stagnn.dataset import EngineTrajectory
from stagnn.errors import ClusteringError
from stagnn.normalization import (
    NormStats,
    apply_norm,
    apply_norm_all,
    assign,
    assign_many,
    fit_kmeans,
    fit_norm,
)
from stagnn.synthetic import make_fleet


def brute_force_two_partition(points):
    """Lowest-SSE split into two non-empty groups, as a frozenset of frozensets."""
    n = len(points)
    best, best_cost = None, np.inf
    # point 0 always sits in group A, so each split is visited once
    for bits in itertools.product([0, 1], repeat=n - 1):
        labels = np.array((0,) + bits)
        if labels.all() or not labels.any():
            continue
        cost = 0.0
        for g in (0, 1):
            block = points[labels == g]
            cost += ((block - block.mean(axis=0)) ** 2).sum()
        if cost < best_cost - 1e-12:
            best_cost, best = cost, labels
    return partition(best)


def partition(labels):
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), set()).add(i)
    return frozenset(frozenset(g) for g in groups.values())


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(4, 12),
    seed=st.integers(0, 10_000),
    gap=st.floats(4.0, 20.0),
)
def test_kmeans_matches_brute_force_partition(n, seed, gap):
    rng = np.random.default_rng(seed)
    split = int(rng.integers(1, n))
    centres = np.array([[0.0, 0.0, 0.0], [gap, -gap / 2, gap / 3]])
    planted = np.array([0] * split + [1] * (n - split))
    points = centres[planted] + rng.normal(scale=0.5, size=(n, 3))
    result = fit_kmeans(points, 2, seed=seed)
    assert partition(result.labels) == brute_force_two_partition(points)


def test_kmeans_k1_is_the_mean(rng):
    pts = rng.normal(size=(30, 3))
    result = fit_kmeans(pts, 1)
    np.testing.assert_allclose(result.centroids[0], pts.mean(axis=0), rtol=0, atol=1e-14)


def test_kmeans_needs_enough_distinct_points():
    with pytest.raises(ClusteringError):
        fit_kmeans(np.ones((10, 3)), 2)
    with pytest.raises(ClusteringError):
        fit_kmeans(np.empty((0, 3)), 1)


def test_kmeans_objective_never_increases(rng):
    pts = np.concatenate([rng.normal(loc=c, size=(40, 3)) for c in (0.0, 1.5, 3.0, 4.0)])
    for seed in range(5):
        hist = fit_kmeans(pts, 4, seed=seed).inertia_history
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_is_deterministic_and_sorted(rng):
    pts = np.concatenate([rng.normal(loc=c, scale=0.1, size=(20, 3)) for c in (5.0, -3.0, 1.0)])
    a, b = fit_kmeans(pts, 3, seed=11), fit_kmeans(pts, 3, seed=11)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert list(a.centroids[:, 0]) == sorted(a.centroids[:, 0])


def test_six_regime_settings_form_tight_clusters():
    # synthetic stand-in for multi-condition settings; the benchmark check is in the acceptance suite
    train, _ = make_fleet(n_train=10, n_test=1, n_conditions=6, seed=5, min_life=60, max_life=90)
    ops = np.concatenate([t.op_settings for t in train])
    result = fit_kmeans(ops, 6, seed=0)
    spread = np.linalg.norm(ops - result.centroids[result.labels], axis=1).max()
    gaps = np.linalg.norm(result.centroids[:, None] - result.centroids[None], axis=-1)
    assert spread < 0.01 * gaps[~np.eye(6, dtype=bool)].min()


# -- assign ---------------------------------------------------------------------


def stats_with(centroids, n_channels=2):
    centroids = np.asarray(centroids, dtype=np.float64)
    k = len(centroids)
    return NormStats("clustered", centroids, np.zeros((k, n_channels)), np.ones((k, n_channels)))


def test_assign_examples():
    stats = stats_with([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    assert assign([2.0, 0.0, 0.0], stats) == 2
    assert assign([0.0, 0.0, 0.0], stats) == 1
    assert assign([1.0, 0.0, 0.0], stats) == 1  # midpoint ties go to the lower label
    single = stats_with([[3.0, 1.0, 4.0]])
    assert set(assign_many(np.random.default_rng(0).normal(size=(20, 3)), single)) == {1}


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 1000))
def test_assign_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    stats = stats_with(rng.normal(size=(4, 3)))
    v = rng.normal(size=3)
    first = assign(v, stats)
    assert assign(stats.centroids[first - 1], stats) == first
    assert assign(v, stats) == first


# -- fit/apply ------------------------------------------------------------------


def traj_from(features, uid=1):
    features = np.asarray(features, dtype=np.float64)
    return EngineTrajectory(uid, np.arange(1, len(features) + 1), features[:, :3], features[:, 3:])


def test_unified_min_max_example():
    feats = np.zeros((3, 24))
    feats[:, 5] = [2.0, 4.0, 6.0]
    stats = fit_norm([traj_from(feats)], "unified")
    assert stats.mins[0, 5] == 2.0 and stats.maxs[0, 5] == 6.0
    out = apply_norm(traj_from(feats), stats).features
    np.testing.assert_array_equal(out[:, 5], [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(out[:, 6], 0.0)  # constant channel


def test_out_of_range_values_are_not_clipped():
    feats = np.zeros((2, 24))
    feats[:, 10] = [0.0, 10.0]
    stats = fit_norm([traj_from(feats)], "unified")
    probe = np.zeros((2, 24))
    probe[:, 10] = [-5.0, 20.0]
    np.testing.assert_array_equal(apply_norm(traj_from(probe), stats).features[:, 10], [-0.5, 2.0])


def test_two_clusters_with_constant_channel():
    feats = np.zeros((4, 24))
    feats[:2, 0] = 0.0
    feats[2:, 0] = 10.0
    feats[:2, 7] = 3.0
    feats[2:, 7] = 8.0
    stats = fit_norm([traj_from(feats)], "clustered", k=2)
    np.testing.assert_array_equal(stats.mins[:, 7], stats.maxs[:, 7])
    np.testing.assert_array_equal(stats.mins[:, 7], [3.0, 8.0])
    np.testing.assert_array_equal(apply_norm(traj_from(feats), stats).features[:, 7], 0.0)


def test_clustered_stats_differ_from_unified_on_multi_condition_data():
    train, _ = make_fleet(n_train=6, n_test=1, n_conditions=6, seed=2, min_life=50, max_life=60)
    unified = fit_norm(train, "unified")
    clustered = fit_norm(train, "clustered", k=6)
    assert clustered.k == 6 and unified.k == 1
    assert np.any(clustered.mins > unified.mins[0]) and np.any(clustered.maxs < unified.maxs[0])


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 500), k=st.integers(1, 6))
def test_training_values_land_in_unit_interval(seed, k):
    train, _ = make_fleet(n_train=4, n_test=1, n_conditions=6, seed=seed, min_life=30, max_life=50)
    stats = fit_norm(train, "clustered", k=k, seed=seed)
    values = np.concatenate([t.features for t in apply_norm_all(train, stats)])
    assert values.min() >= 0.0 and values.max() <= 1.0


def test_k1_clustered_equals_unified_bitwise():
    train, test = make_fleet(n_train=5, n_test=3, n_conditions=6, seed=8, min_life=40, max_life=60)
    unified = fit_norm(train, "unified", seed=3)
    clustered = fit_norm(train, "clustered", k=1, seed=3)
    for trajs in (train, test):
        for a, b in zip(apply_norm_all(trajs, unified), apply_norm_all(trajs, clustered)):
            assert a.features.tobytes() == b.features.tobytes()


def test_stats_round_trip_exactly(tmp_path):
    train, _ = make_fleet(n_train=4, n_test=1, n_conditions=6, seed=1, min_life=30, max_life=40)
    stats = fit_norm(train, "clustered", k=6, seed=9)
    stats.save(tmp_path / "s.json")
    loaded = NormStats.load(tmp_path / "s.json")
    assert loaded == stats
    for name in ("centroids", "mins", "maxs"):
        assert getattr(loaded, name).tobytes() == getattr(stats, name).tobytes()


def test_fit_norm_rejects_empty_cluster_and_empty_input():
    feats = np.zeros((6, 24))
    feats[:3, 0] = 1.0
    with pytest.raises(ClusteringError):
        fit_norm([traj_from(feats)], "clustered", k=3)
    with pytest.raises(ValueError):
        fit_norm([], "unified")
