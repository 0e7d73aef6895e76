"""Signal/background segmentation: threshold partition, DBSCAN, HDBSCAN and a Gaussian mixture."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import linkage
from scipy.spatial.distance import squareform
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.cluster import DBSCAN as _SkDBSCAN

from . import _rng
from ._validation import check_scalar, image_array, point_array
from .exceptions import BadParams, SingularComponent


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points ``(n, 2)`` in physical units with optional per-point intensity."""

    points: np.ndarray
    intensity: np.ndarray = None

    def __post_init__(self):
        pts = point_array(self.points)
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            w = np.asarray(self.intensity, dtype=np.float64).ravel()
            if w.shape != (pts.shape[0],) or not np.all(np.isfinite(w)) or (w.size and w.min() < 0):
                raise BadParams("intensity must be one finite nonnegative value per point")
            object.__setattr__(self, "intensity", w)

    @property
    def n(self):
        return self.points.shape[0]

    @classmethod
    def from_image(cls, img, floor=0.0):
        """One point per pixel with intensity strictly above ``floor``."""
        I = image_array(img)
        cal = img.calibration() if callable(getattr(img, "calibration", None)) else {}
        x = cal.get("x_origin", 0.0) + np.arange(I.shape[1]) * cal.get("x_step", 1.0)
        xp = cal.get("xp_origin", 0.0) + np.arange(I.shape[0]) * cal.get("xp_step", 1.0)
        r, c = np.nonzero(I > floor)
        return cls(np.column_stack([x[c], xp[r]]), I[r, c])


@dataclass(frozen=True, eq=False)
class ClusterLabels:
    labels: np.ndarray
    k: int

    @classmethod
    def from_labels(cls, labels):
        labels = np.asarray(labels, dtype=np.int64)
        return cls(labels, int(np.unique(labels[labels >= 0]).size))


def _points(cloud):
    return cloud.points if isinstance(cloud, PointCloud) else point_array(cloud)


def threshold_partition(img, t):
    """Boolean signal mask ``intensity >= t``."""
    return image_array(img) >= t


def dbscan(cloud, eps, min_pts):
    """DBSCAN where a point's neighbourhood includes itself.

    Border points reachable from several clusters join the cluster that is
    expanded first when scanning points in input order.
    """
    check_scalar(eps, "eps", lo=0, lo_open=True)
    check_scalar(min_pts, "min_pts", lo=1, integer=True)
    pts = _points(cloud)
    if pts.shape[0] == 0:
        return ClusterLabels(np.zeros(0, dtype=np.int64), 0)
    labels = _SkDBSCAN(eps=eps, min_samples=min_pts, algorithm="brute").fit(pts).labels_
    return ClusterLabels.from_labels(labels)


def core_mask(cloud, eps, min_pts):
    pts = _points(cloud)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    return (d2 <= eps * eps).sum(axis=1) >= min_pts


def _condensed_tree(Z, n, min_cluster_size):
    """Walk a single-linkage merge table top-down into HDBSCAN's condensed tree.

    Returns ``point_parent`` and ``point_lambda`` (the cluster each point
    finally leaves and when), ``parent``/``birth`` per condensed cluster
    (cluster 0 is the root). Child ids are always larger than their parent's.
    """
    size = np.concatenate([np.ones(n, dtype=np.int64), Z[:, 3].astype(np.int64)])
    dist = np.concatenate([np.zeros(n), Z[:, 2]])
    positive = dist[dist > 0]
    lam_cap = 1e3 / positive.min() if positive.size else 1.0
    lam = np.where(dist > 0, 1.0 / np.where(dist > 0, dist, 1.0), lam_cap)

    def leaves(node):
        out, stack = [], [node]
        while stack:
            v = stack.pop()
            if v < n:
                out.append(v)
            else:
                stack.extend((int(Z[v - n, 0]), int(Z[v - n, 1])))
        return out

    point_parent = np.zeros(n, dtype=np.int64)
    point_lambda = np.zeros(n)
    parent, birth = [-1], [0.0]
    stack = [(2 * n - 2, 0)]
    while stack:
        node, cid = stack.pop()
        if node < n:
            point_parent[node], point_lambda[node] = cid, lam_cap
            continue
        a, b = int(Z[node - n, 0]), int(Z[node - n, 1])
        split = lam[node]
        big_a, big_b = size[a] >= min_cluster_size, size[b] >= min_cluster_size
        if big_a and big_b:
            for child in (a, b):
                parent.append(cid)
                birth.append(split)
                stack.append((child, len(parent) - 1))
            continue
        for child, big in ((a, big_a), (b, big_b)):
            if big:
                stack.append((child, cid))
            else:
                for p in leaves(child):
                    point_parent[p], point_lambda[p] = cid, split
    return point_parent, point_lambda, np.array(parent), np.array(birth)


def hdbscan(cloud, min_cluster_size=25):
    """Hierarchical density clustering selected by excess of mass.

    Core distances use the ``min_cluster_size``-th nearest neighbour
    (counting the point itself); the single-linkage tree of mutual
    reachability distances is condensed, and clusters are chosen to
    maximise total stability. The root may be selected, so a cloud holding
    one dense group comes back as a single cluster. Points that leave a
    selected cluster (or one of its descendants) keep its label; the rest
    are noise.
    """
    check_scalar(min_cluster_size, "min_cluster_size", lo=2, integer=True)
    pts = _points(cloud)
    n = pts.shape[0]
    if n < min_cluster_size:
        return ClusterLabels(-np.ones(n, dtype=np.int64), 0)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    core = np.sort(d, axis=1)[:, min_cluster_size - 1]
    mr = np.maximum(d, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(mr, 0.0)
    Z = linkage(squareform(mr, checks=False), method="single")

    point_parent, point_lambda, parent, birth = _condensed_tree(Z, n, min_cluster_size)
    m = parent.size
    # stability: sum over members of (lambda leaving the cluster - lambda at birth)
    stability = np.zeros(m)
    np.add.at(stability, point_parent, point_lambda - birth[point_parent])
    sizes = np.bincount(point_parent, minlength=m).astype(np.float64)
    subtree = sizes.copy()
    for c in range(m - 1, 0, -1):
        subtree[parent[c]] += subtree[c]
    # members that stay in a child leave the parent at the split
    for c in range(1, m):
        stability[parent[c]] += subtree[c] * (birth[c] - birth[parent[c]])

    children = [[] for _ in range(m)]
    for c in range(1, m):
        children[parent[c]].append(c)
    selected = np.zeros(m, dtype=bool)
    best = stability.copy()
    for c in range(m - 1, -1, -1):
        kids = sum(best[k] for k in children[c])
        if children[c] and kids > stability[c]:
            best[c] = kids
        else:
            best[c] = stability[c]
            selected[c] = True
            stack = list(children[c])
            while stack:
                k = stack.pop()
                selected[k] = False
                stack.extend(children[k])

    owner = np.full(m, -1, dtype=np.int64)
    for c in range(m):
        if selected[c]:
            owner[c] = c
        elif c > 0 and owner[parent[c]] >= 0:
            owner[c] = owner[parent[c]]
    chosen = np.flatnonzero(selected)
    relabel = {c: i for i, c in enumerate(chosen)}
    labels = np.array([relabel.get(owner[c], -1) if owner[c] >= 0 else -1 for c in point_parent], dtype=np.int64)
    return ClusterLabels.from_labels(labels)


# Gaussian mixture ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GMMResult:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    labels: np.ndarray
    log_likelihood: np.ndarray
    responsibilities: np.ndarray
    reg: float
    converged: bool


def _component_logpdf(X, means, covs, reg):
    n, d = X.shape
    out = np.empty((n, means.shape[0]))
    for j, (mu, cov) in enumerate(zip(means, covs)):
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise SingularComponent(f"component {j} has a singular covariance") from None
        sol = np.linalg.solve(L, (X - mu).T)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        inv_trace = float((np.linalg.inv(L) ** 2).sum())
        # the -reg/2 tr(cov^-1) factor makes the +reg*I covariance update an exact M-step
        out[:, j] = -0.5 * ((sol * sol).sum(axis=0) + d * math.log(2 * math.pi) + logdet + reg * inv_trace)
    return out


def gmm_fit(cloud, k=2, seed=0, weights=None, tol=1e-8, max_iter=500):
    """Fit a ``k``-component Gaussian mixture by EM.

    Covariances receive ``reg * I`` with ``reg = 1e-6 * trace(cov(X)) / d``.
    ``log_likelihood`` holds, per EM step, the weighted log-likelihood of the
    matching penalized model (each component density carries an extra factor
    ``exp(-reg/2 * tr(cov^-1))``); EM never decreases it. Iteration stops when
    the relative change drops below ``tol`` or after ``max_iter`` steps.
    """
    check_scalar(k, "k", lo=1, integer=True)
    X = _points(cloud)
    n, d = X.shape
    if n < 10 * k:
        raise BadParams(f"need at least {10 * k} points for k={k}, got {n}")
    if weights is None and isinstance(cloud, PointCloud) and cloud.intensity is not None:
        weights = cloud.intensity
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    if w.shape != (n,) or w.min() < 0 or not w.sum() > 0:
        raise BadParams("weights must be nonnegative with a positive sum")

    wsum = w.sum()
    mean_all = w @ X / wsum
    cov_all = ((X - mean_all).T * w) @ (X - mean_all) / wsum
    reg = 1e-6 * float(np.trace(cov_all)) / d
    if not reg > 0:
        raise SingularComponent("points have zero spread")

    rng = _rng.stream(seed, _rng.GMM)
    means = X[rng.choice(n, size=k, replace=False)].copy()
    covs = np.repeat((cov_all + reg * np.eye(d))[None], k, axis=0)
    pis = np.full(k, 1.0 / k)

    trace = []
    converged = False
    for _ in range(max_iter):
        logp = _component_logpdf(X, means, covs, reg) + np.log(pis)
        norm = logsumexp(logp, axis=1)
        ll = float(w @ norm)
        resp = np.exp(logp - norm[:, None])
        if trace and abs(ll - trace[-1]) < tol * abs(trace[-1]):
            trace.append(ll)
            converged = True
            break
        trace.append(ll)
        r = resp * w[:, None]
        nk = r.sum(axis=0)
        if np.any(nk <= 0):
            raise SingularComponent("a mixture component lost all its mass")
        pis = nk / wsum
        means = (r.T @ X) / nk[:, None]
        for j in range(k):
            D = X - means[j]
            covs[j] = (D.T * r[:, j]) @ D / nk[j] + reg * np.eye(d)
    logp = _component_logpdf(X, means, covs, reg) + np.log(pis)
    resp = np.exp(logp - logsumexp(logp, axis=1)[:, None])
    return GMMResult(pis, means, covs, resp.argmax(axis=1), np.array(trace), resp, reg, converged)


class GaussianMixtureSegmenter(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`gmm_fit`; ``sample_weight`` carries pixel intensities."""

    def __init__(self, n_components=2, seed=0, tol=1e-8, max_iter=500):
        self.n_components = n_components
        self.seed = seed
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None, sample_weight=None):
        res = gmm_fit(X, self.n_components, self.seed, sample_weight, self.tol, self.max_iter)
        self.weights_, self.means_, self.covariances_ = res.weights, res.means, res.covariances
        self.reg_ = res.reg
        self.log_likelihood_trace_ = res.log_likelihood
        self.converged_ = res.converged
        self.labels_ = res.labels
        return self

    def predict_proba(self, X):
        logp = _component_logpdf(point_array(X), self.means_, self.covariances_, self.reg_) + np.log(self.weights_)
        return np.exp(logp - logsumexp(logp, axis=1)[:, None])

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)
