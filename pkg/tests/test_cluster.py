from itertools import combinations
from math import comb

import numpy as np
import pytest

from cpawarp import (
    ClusterModel,
    ClusterState,
    adjusted_rand,
    assign,
    incremental_mean,
    incremental_scaled_variance,
    run_stream,
    warmup,
)
from cpawarp.csvio import read_labels_csv, read_stream_csv
from cpawarp.errors import InsufficientData, ShapeMismatch, UsageError
from cpawarp.synthetic import PROTOTYPES, warped_copies

from conftest import FIXTURES


def pair_count_ari(a, b):
    """Adjusted Rand index from explicit pair counts."""
    a, b = np.asarray(a), np.asarray(b)
    n = a.size
    both = sum(1 for i, j in combinations(range(n), 2) if a[i] == a[j] and b[i] == b[j])
    same_a = sum(comb(int(c), 2) for c in np.unique(a, return_counts=True)[1])
    same_b = sum(comb(int(c), 2) for c in np.unique(b, return_counts=True)[1])
    expected = same_a * same_b / comb(n, 2)
    top = 0.5 * (same_a + same_b)
    return (both - expected) / (top - expected)


def families(per_family=15, seed=0):
    series, truth = [], []
    for k, name in enumerate(PROTOTYPES):
        copies, _, _ = warped_copies(name, count=per_family, length=64, lambda_sigma=0.05,
                                     seed=seed + k)
        series.extend(copies)
        truth.extend([k] * per_family)
    order = np.random.default_rng(seed).permutation(len(series))
    return [series[i] for i in order], np.array(truth)[order]


@pytest.fixture(scope="module")
def family_warmup():
    series, truth = families()
    model, labels = warmup(series, 4, seed=1)
    return series, truth, model, labels


@pytest.fixture(scope="module")
def stream_runs():
    stream = read_stream_csv(FIXTURES / "stream4.csv")
    truth_map = read_labels_csv(FIXTURES / "stream4_truth.csv")
    ids = [sid for sid, _ in stream]
    series = [s for _, s in stream]
    truth = np.array([truth_map[sid] for sid in ids])
    runs = {}
    for aligned in (True, False):
        _, out = run_stream(series, warmup_size=60, k=4, radius_factor=2.0,
                            use_alignment=aligned)
        runs[aligned] = np.array([a.cluster_id for a in out])
    return truth, runs


class TestIncrementalStatistics:
    def test_mean_examples(self):
        assert incremental_mean(0.0, 4.0, 1) == 4.0
        assert incremental_mean(4.0, 6.0, 2) == 5.0

    def test_variance_examples(self):
        assert incremental_scaled_variance(0.0, 4.0, 0.0, 4.0) == 0.0
        v = incremental_scaled_variance(0.0, 6.0, 4.0, 5.0)
        assert v == 2.0
        assert np.sqrt(v / 2) == 1.0

    def test_matches_batch(self, rng):
        x = rng.standard_normal(10_000)
        mu, v = 0.0, 0.0
        for n, xi in enumerate(x, start=1):
            new = incremental_mean(mu, xi, n)
            v = incremental_scaled_variance(v, xi, mu, new)
            mu = new
            assert v >= 0.0
        assert abs(mu - x.mean()) <= 1e-12
        assert abs(v - np.sum((x - x.mean()) ** 2)) <= 1e-9 * np.sum((x - x.mean()) ** 2)
        assert np.sqrt(v / x.size) == pytest.approx(x.std(), rel=1e-9)

    def test_entrywise_series(self, rng):
        X = rng.standard_normal((500, 7)) + 3.0
        mu, v = np.zeros(7), np.zeros(7)
        for n, x in enumerate(X, start=1):
            new = incremental_mean(mu, x, n)
            v = incremental_scaled_variance(v, x, mu, new)
            mu = new
        np.testing.assert_allclose(mu, X.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(v, ((X - X.mean(axis=0)) ** 2).sum(axis=0), rtol=1e-9)

    def test_invalid_count(self):
        with pytest.raises(UsageError):
            incremental_mean(0.0, 1.0, 0)

    def test_one_cluster_identity_stream(self, rng):
        # alignment disabled and an unbounded gate: every point joins one cluster
        X = rng.standard_normal((300, 20))
        model = ClusterModel([ClusterState(0, X[0].reshape(-1, 1).copy(),
                                           np.zeros((20, 1)), 1)],
                             radius_factor=1e300, length=20, use_alignment=False)
        model.clusters[0].scaled_variance[:] = 1e-300
        for x in X[1:]:
            assert not assign(model, x).created
        state = model.clusters[0]
        assert state.size == 300
        np.testing.assert_allclose(state.centroid[:, 0], X.mean(axis=0), rtol=1e-9, atol=1e-14)
        np.testing.assert_allclose(state.scaled_variance[:, 0],
                                   ((X - X.mean(axis=0)) ** 2).sum(axis=0), rtol=1e-9)


class TestWarmup:
    def test_one_series_per_cluster(self):
        series, _ = families(per_family=1)
        model, labels = warmup(series, len(series), n_init=1, n_iter=2)
        assert sorted(labels) == list(range(len(series)))
        assert all(np.all(c.scaled_variance == 0.0) for c in model.clusters)
        assert all(c.size == 1 for c in model.clusters)

    def test_recovers_families(self, family_warmup):
        _, truth, model, labels = family_warmup
        assert model.n_clusters == 4
        assert adjusted_rand(truth, labels) >= 0.9

    def test_variance_seeded(self, family_warmup):
        _, _, model, labels = family_warmup
        for c in model.clusters:
            assert np.all(c.scaled_variance >= 0.0)
            assert c.size == np.sum(labels == c.id)
        assert any(np.any(c.scaled_variance > 0) for c in model.clusters)

    def test_deterministic(self):
        series, _ = families(per_family=4)
        a, la = warmup(series, 4, seed=3, n_iter=2)
        b, lb = warmup(series, 4, seed=3, n_iter=2)
        np.testing.assert_array_equal(la, lb)
        for ca, cb in zip(a.clusters, b.clusters):
            np.testing.assert_array_equal(ca.centroid, cb.centroid)
            np.testing.assert_array_equal(ca.scaled_variance, cb.scaled_variance)

    def test_errors(self):
        with pytest.raises(InsufficientData):
            warmup([np.zeros(10)] * 3, 4)
        with pytest.raises(InsufficientData):
            warmup([np.zeros(10)] * 3, 0)
        with pytest.raises(UsageError):
            warmup([np.zeros(10)] * 3, 2, init="farthest")


class TestAssign:
    def test_centroid_query(self, family_warmup):
        _, _, model, _ = family_warmup
        state = model.clusters[2]
        before = state.centroid.copy()
        size = state.size
        out = assign(model, before[:, 0])
        assert not out.created and out.cluster_id == state.id
        assert state.size == size + 1
        np.testing.assert_allclose(state.centroid, before, atol=1e-12)
        model.clusters[2] = ClusterState(state.id, before, state.scaled_variance, size)

    def test_outlier_creates_cluster(self):
        series, _ = families(per_family=5)
        model, _ = warmup(series, 4, n_iter=2)
        count = model.n_clusters
        out = assign(model, 50.0 * np.ones(64))
        assert out.created
        assert model.n_clusters == count + 1
        assert model.clusters[-1].size == 1
        assert len({c.id for c in model.clusters}) == model.n_clusters

    def test_cluster_count_never_decreases(self):
        series, _ = families(per_family=5, seed=2)
        model, _ = warmup(series[:8], 4, n_iter=2)
        counts = [model.n_clusters]
        for x in series[8:]:
            assign(model, x)
            counts.append(model.n_clusters)
        assert all(c1 >= c0 for c0, c1 in zip(counts, counts[1:]))

    def test_radius_limits(self):
        series, _ = families(per_family=5, seed=4)
        tiny, _ = warmup(series[:8], 4, n_iter=2, radius_factor=1e-12)
        huge, _ = warmup(series[:8], 4, n_iter=2, radius_factor=1e12)
        start_tiny, start_huge = tiny.n_clusters, huge.n_clusters
        assert all(assign(tiny, x).created for x in series[8:])
        assert tiny.n_clusters == start_tiny + len(series) - 8
        assert not any(assign(huge, x).created for x in series[8:])
        assert huge.n_clusters == start_huge

    def test_enumeration_order_invariance(self, family_warmup):
        series, _, model, _ = family_warmup
        import copy
        forward = copy.deepcopy(model)
        backward = copy.deepcopy(model)
        backward.clusters = backward.clusters[::-1]
        for x in series[:10]:
            assert assign(forward, x).cluster_id == assign(backward, x).cluster_id

    def test_channel_mismatch(self, family_warmup):
        _, _, model, _ = family_warmup
        with pytest.raises(ShapeMismatch):
            assign(model, np.zeros((64, 2)))

    def test_invalid_model(self):
        with pytest.raises(UsageError):
            ClusterModel([], radius_factor=0.0)
        with pytest.raises(UsageError):
            ClusterModel([], gate="median")


class TestStream:
    def test_elastic_ari(self, stream_runs):
        truth, runs = stream_runs
        assert adjusted_rand(truth, runs[True]) >= 0.9

    def test_beats_euclidean(self, stream_runs):
        truth, runs = stream_runs
        assert adjusted_rand(truth, runs[True]) > adjusted_rand(truth, runs[False])

    def test_too_short(self):
        with pytest.raises(InsufficientData):
            run_stream([np.zeros(10)] * 5, warmup_size=10)


class TestAdjustedRand:
    def test_against_pair_counts(self, rng):
        for _ in range(20):
            a = rng.integers(4, size=40)
            b = rng.integers(5, size=40)
            assert adjusted_rand(a, b) == pytest.approx(pair_count_ari(a, b), abs=1e-12)

    def test_relabeling(self):
        assert adjusted_rand([0, 0, 1, 1, 2], [7, 7, 3, 3, 9]) == 1.0
