import numpy as np
import pytest

from beamdip.clustering import (
    ClusterLabels,
    GaussianMixtureSegmenter,
    PointCloud,
    core_mask,
    dbscan,
    gmm_fit,
    hdbscan,
    threshold_partition,
)
from beamdip.exceptions import BadParams, SingularComponent
from beamdip.image_io import ScanImage
from oracles import reachability_partition, same_partition


def _blob(rng, n, center, scale):
    return rng.normal(center, scale, size=(n, 2))


def test_threshold_partition():
    I = np.random.default_rng(0).random((6, 7))
    assert threshold_partition(I, I.min()).all()
    assert not threshold_partition(I, I.max() + 1).any()
    counts = [threshold_partition(I, t).sum() for t in np.linspace(0, 1, 30)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    img = ScanImage(I)
    np.testing.assert_array_equal(threshold_partition(img, 0.5), I >= 0.5)


def test_point_cloud_from_image():
    I = np.zeros((3, 4))
    I[1, 2] = 2.0
    I[2, 0] = 0.5
    pc = PointCloud.from_image(ScanImage(I, x_origin=-1.0, x_step=0.5, xp_origin=3.0, xp_step=2.0), floor=0.1)
    assert pc.n == 2
    assert {tuple(p) for p in pc.points} == {(0.0, 5.0), (-1.0, 7.0)}
    with pytest.raises(BadParams):
        PointCloud(np.zeros((2, 2)), intensity=[1.0, -1.0])


def test_dbscan_hand_example():
    res = dbscan(PointCloud([[0, 0], [0, 1], [10, 10]]), 1.5, 2)
    assert res.labels.tolist() == [0, 0, -1] and res.k == 1


def test_dbscan_empty():
    res = dbscan(PointCloud(np.zeros((0, 2))), 1.0, 3)
    assert res.labels.size == 0 and res.k == 0


def test_dbscan_two_far_blobs_match_oracle():
    rng = np.random.default_rng(1)
    eps = 0.5
    pts = np.vstack([_blob(rng, 50, (0, 0), 0.3), _blob(rng, 50, (100 * eps, 0), 0.3)])
    res = dbscan(pts, eps, 4)
    assert res.k == 2
    core, comp = reachability_partition(pts, eps, 4)
    assert same_partition(res.labels[core], comp[core])


def test_dbscan_core_partition_matches_oracle_and_is_permutation_invariant():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(5, 80))
        pts = rng.uniform(0, 10, size=(n, 2))
        eps, mp = float(rng.uniform(0.5, 2.5)), int(rng.integers(1, 6))
        res = dbscan(pts, eps, mp)
        core, comp = reachability_partition(pts, eps, mp)
        np.testing.assert_array_equal(core_mask(pts, eps, mp), core)
        assert same_partition(res.labels[core], comp[core])
        assert np.all(res.labels[~core & (res.labels >= 0)] >= 0)
        assert res.k <= n and set(range(res.k)) <= set(res.labels.tolist())
        perm = rng.permutation(n)
        res_p = dbscan(pts[perm], eps, mp)
        back = np.empty(n, dtype=np.int64)
        back[perm] = res_p.labels
        assert same_partition(back[core], res.labels[core])


def test_dbscan_validates():
    with pytest.raises(BadParams):
        dbscan(np.zeros((3, 2)), 0.0, 2)
    with pytest.raises(BadParams):
        dbscan(np.zeros((3, 2)), 1.0, 0)


def test_cluster_labels_count():
    lab = ClusterLabels.from_labels([-1, 2, 2, 0])
    assert lab.k == 2


def test_hdbscan_single_blob():
    pts = _blob(np.random.default_rng(3), 40, (0, 0), 0.2)
    res = hdbscan(pts, 5)
    assert res.k == 1
    assert (res.labels == 0).mean() >= 0.9


def test_hdbscan_different_densities():
    rng = np.random.default_rng(4)
    dense = _blob(rng, 60, (0, 0), 0.1)
    sparse = _blob(rng, 60, (12, 0), 1.0)
    res = hdbscan(np.vstack([dense, sparse]), 10)
    assert res.k == 2
    a, b = res.labels[:60], res.labels[60:]
    ma = np.bincount(a[a >= 0]).argmax()
    mb = np.bincount(b[b >= 0]).argmax()
    assert ma != mb
    assert (a == ma).mean() >= 0.9 and (b == mb).mean() >= 0.9


def test_hdbscan_tiny_inputs():
    assert hdbscan(np.zeros((1, 2)), 2).labels.tolist() == [-1]
    assert hdbscan(np.random.default_rng(0).random((4, 2)), 5).k == 0
    with pytest.raises(BadParams):
        hdbscan(np.zeros((5, 2)), 1)


def test_hdbscan_agrees_with_dbscan_on_uniform_blobs():
    matches = 0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        nb = int(rng.integers(1, 4))
        pts = []
        for j in range(nb):
            r = 3.0 * np.sqrt(rng.random(80))
            t = rng.uniform(0, 2 * np.pi, 80)
            pts.append(np.column_stack([r * np.cos(t), r * np.sin(t)]) + (20.0 * j, 0.0))
        pts = np.vstack(pts)
        k = 8
        matches += hdbscan(pts, k).k == dbscan(pts, 1.5, k).k
    assert matches >= 8


def test_gmm_single_component_closed_form():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(200, 2)) @ np.array([[1.0, 0.3], [0.0, 0.5]]) + (2.0, -1.0)
    w = rng.random(200)
    res = gmm_fit(PointCloud(X, w), k=1)
    mu = w @ X / w.sum()
    cov = ((X - mu).T * w) @ (X - mu) / w.sum()
    np.testing.assert_allclose(res.means[0], mu, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(res.covariances[0], cov + res.reg * np.eye(2), rtol=1e-12, atol=1e-14)
    assert res.reg == pytest.approx(1e-6 * np.trace(cov) / 2, rel=1e-12)


def test_gmm_two_separated_blobs():
    rng = np.random.default_rng(6)
    s = 0.5
    c0, c1 = np.array([0.0, 0.0]), np.array([20 * s, 0.0])
    A, B = _blob(rng, 150, c0, s), _blob(rng, 150, c1, s)
    res = gmm_fit(np.vstack([A, B]), k=2, seed=0)
    got = sorted(res.means.tolist())
    for m, blob in zip(got, (A, B)):
        assert np.linalg.norm(np.array(m) - blob.mean(axis=0)) < 0.1 * s
    assert len(set(res.labels[:150])) == 1 and len(set(res.labels[150:])) == 1


def test_gmm_trace_nondecreasing_and_responsibilities():
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        k = int(rng.integers(2, 4))
        X = np.vstack([_blob(rng, 40, rng.uniform(-5, 5, 2), rng.uniform(0.3, 2)) for _ in range(k)])
        res = gmm_fit(X, k=k, seed=seed)
        assert np.all(np.diff(res.log_likelihood) >= -1e-9)
        np.testing.assert_allclose(res.responsibilities.sum(axis=1), 1.0, atol=1e-12, rtol=0)
        np.testing.assert_array_equal(res.labels, res.responsibilities.argmax(axis=1))


def test_gmm_errors():
    with pytest.raises(BadParams):
        gmm_fit(np.zeros((15, 2)), k=2)
    with pytest.raises(SingularComponent):
        gmm_fit(np.ones((30, 2)), k=2)


def test_gmm_estimator():
    rng = np.random.default_rng(7)
    X = np.vstack([_blob(rng, 50, (0, 0), 0.5), _blob(rng, 50, (8, 8), 0.5)])
    est = GaussianMixtureSegmenter(n_components=2, seed=1).fit(X)
    np.testing.assert_array_equal(est.predict(X), est.labels_)
    assert est.get_params()["n_components"] == 2
    np.testing.assert_allclose(est.predict_proba(X).sum(axis=1), 1.0, atol=1e-12)
