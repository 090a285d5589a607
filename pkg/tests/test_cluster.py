import numpy as np
import pytest
from sklearn.metrics import silhouette_score

from dgt.cluster import (
    ClusterError, best_k, cluster_scan, inertia_curve, kmeans, pca_scatter, raw_features, silhouette,
    silhouette_samples, stock_features,
)
from dgt.ingest import PricePanel
from dgt.synthetic import business_days, two_blobs

from oracles import silhouette_loops, stock_features_loops


def _panel(prices):
    prices = np.asarray(prices, dtype=float)
    return PricePanel([f"S{i}" for i in range(len(prices))], business_days(prices.shape[1]), prices)


def test_raw_features_match_hand_oracle():
    prices = [[10, 11, 10.5, 12, 12.6], [20, 19, 19.5, 21, 20], [5, 5.5, 6, 5.8, 6.3]]
    np.testing.assert_allclose(raw_features(prices), stock_features_loops(prices), rtol=1e-12)


def test_standardized_features_on_a_longer_panel():
    rng = np.random.default_rng(0)
    prices = 50 * np.cumprod(1 + rng.normal(0, 0.01, size=(6, 60)) * rng.uniform(0.5, 3, size=(6, 1)), axis=1)
    fm = stock_features(_panel(prices))
    raw = np.array(stock_features_loops(prices.tolist()))
    np.testing.assert_allclose(fm.values, (raw - raw.mean(0)) / raw.std(0), rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(fm.values.mean(axis=0), 0, atol=1e-12)
    # volatility ordering survives standardization
    assert np.array_equal(np.argsort(fm.values[:, 1]), np.argsort(raw[:, 1]))


def test_degenerate_panels_are_rejected():
    series = 10 + np.sin(np.arange(40))
    with pytest.raises(ClusterError, match="zero cross-stock variance"):
        stock_features(_panel(np.tile(series, (3, 1))))
    flat = np.vstack([series, np.full(40, 7.0), series * 2])
    with pytest.raises(ClusterError, match="constant price"):
        stock_features(_panel(flat))
    with pytest.raises(ClusterError, match="shorter than 30"):
        stock_features(_panel(np.vstack([series, series + 1])[:, :20]))


def test_two_locations_and_k_equals_n_give_zero_inertia():
    x = np.array([[0.0, 0.0]] * 5 + [[3.0, 4.0]] * 4)
    a = kmeans(x, 2, seed=1)
    assert a.inertia == 0.0
    assert sorted(map(tuple, a.centroids)) == [(0.0, 0.0), (3.0, 4.0)]
    pts = np.random.default_rng(2).normal(size=(7, 3))
    full = kmeans(pts, 7, seed=0)
    assert full.inertia == 0.0 and sorted(full.labels.tolist()) == list(range(7))


@pytest.mark.parametrize("seed", range(5))
def test_blobs_are_recovered_and_inertia_never_rises(seed):
    x, truth = two_blobs(seed=seed)
    a = kmeans(x, 2, seed=seed)
    agree = max(np.mean(a.labels == truth), np.mean(a.labels != truth))
    assert agree >= 0.99
    assert all(b <= c for c, b in zip(a.history, a.history[1:]))


def test_kmeans_is_deterministic_and_checks_k():
    x, _ = two_blobs(seed=3)
    a, b = kmeans(x, 4, seed=9), kmeans(x, 4, seed=9)
    assert a.labels.tolist() == b.labels.tolist() and a.inertia == b.inertia
    for k in (1, len(x) + 1):
        with pytest.raises(ClusterError):
            kmeans(x, k)
    with pytest.raises(ClusterError):
        kmeans(np.array([[np.nan, 1.0], [0.0, 1.0]]), 2)


def test_empty_cluster_is_reseeded():
    # duplicate points force k-means++ to draw the same seed twice for k > #locations
    x = np.array([[0.0, 0.0]] * 4 + [[10.0, 0.0]] * 4)
    a = kmeans(x, 3, seed=0)
    assert sorted(np.bincount(a.labels, minlength=3).tolist())[0] >= 1


def test_silhouette_matches_loops_and_sklearn():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(25, 3))
    labels = rng.integers(0, 3, size=25)
    labels[:3] = [0, 1, 2]
    s = silhouette(x, labels)
    assert s == pytest.approx(silhouette_loops(x.tolist(), labels.tolist()), abs=1e-12)
    assert s == pytest.approx(silhouette_score(x, labels), abs=1e-12)


def test_silhouette_examples_and_bounds():
    x, truth = two_blobs(separation=15.0, seed=1)
    assert silhouette(x, truth) > 0.8
    one = np.random.default_rng(5).normal(size=(200, 3))
    assert abs(silhouette(one, np.random.default_rng(6).integers(0, 2, size=200))) < 0.1
    single = np.array([[0.0], [1.0], [1.1]])
    samples = silhouette_samples(single, [0, 1, 1])
    assert samples[0] == 0.0 and np.all(np.abs(samples) <= 1)
    with pytest.raises(ClusterError):
        silhouette(x, np.zeros(len(x), dtype=int))


def test_scan_selects_two_for_two_blobs():
    x, _ = two_blobs(seed=0)
    scan = cluster_scan(x, range(2, 7), seed=0)
    assert [row[0] for row in scan] == [2, 3, 4, 5, 6]
    assert best_k(scan) == 2
    assert scan == cluster_scan(x, range(2, 7), seed=0)
    curve = inertia_curve(x, range(2, 7), seed=0)
    assert [c[1] for c in curve] == [row[2] for row in scan]
    baseline = ((x - x.mean(0)) ** 2).sum()
    assert curve[0][1] < 0.2 * baseline
    assert curve[0][1] - curve[-1][1] < 0.5 * (baseline - curve[0][1])
    tail = inertia_curve(x[:10], [9], seed=0)[0][1]
    assert tail < 0.05 * ((x[:10] - x[:10].mean(0)) ** 2).sum()


def test_best_k_ties_go_to_the_smaller_k():
    assert best_k([(2, 0.5, 9.0), (3, 0.5, 4.0), (4, 0.4, 1.0)]) == 2


def test_pca_scatter():
    x, truth = two_blobs(seed=2)
    xy = pca_scatter(x)
    assert xy.shape == (len(x), 2)
    np.testing.assert_allclose(xy.mean(axis=0), 0, atol=1e-12)
    # blobs separate along the first component
    assert abs(xy[truth == 0, 0].mean() - xy[truth == 1, 0].mean()) > 5
    # the sign convention pins the axes, so negating the data negates the scatter
    np.testing.assert_allclose(pca_scatter(-x), -xy, atol=1e-9)


def test_labels_invariant_under_positive_price_rescaling():
    rng = np.random.default_rng(7)
    prices = 50 * np.cumprod(1 + rng.normal(0, 0.01, size=(10, 80)) * rng.uniform(0.5, 3, size=(10, 1)), axis=1)
    a = kmeans(stock_features(_panel(prices)), 2, seed=3)
    b = kmeans(stock_features(_panel(prices * rng.uniform(0.1, 10, size=(10, 1)))), 2, seed=3)
    assert a.labels.tolist() == b.labels.tolist()
