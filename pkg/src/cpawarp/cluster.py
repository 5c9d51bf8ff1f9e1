"""Warping-invariant incremental clustering of time-series streams.

A buffer of early arrivals seeds the model with an elastic K-means.  Each
later series is aligned to every centroid; among the clusters whose gate it
passes it joins the closest one, otherwise it starts a new cluster.  Cluster
means and scaled variances are updated with running recurrences, so no
member series are stored.

Distances are reported in RMS units: the square root of the alignment
objective divided by the number of series entries.  The default gate of a
cluster is ``R`` standard deviations of its per-entry aligned residual,
``tau_k = R sqrt(mean(v_k / s_k))``, and it is tested against the RMS of the
aligned residual alone (the quantity ``v_k`` accumulates); the warp penalty
only enters the choice among clusters that pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import adjusted_rand_score

from .align import AlignConfig, _pairwise, as_series, make_aligner
from .errors import InsufficientData, ShapeMismatch, UsageError

__all__ = [
    "ClusterState",
    "ClusterModel",
    "incremental_mean",
    "incremental_scaled_variance",
    "warmup",
    "assign",
    "run_stream",
    "adjusted_rand",
    "resample",
    "CLUSTER_ALIGN",
]

# reduced alignment budget for throughput inside the clustering loop
CLUSTER_ALIGN = AlignConfig(n_cells=16, n_iters=100)


def incremental_mean(mu_prev, x, n: int):
    """Mean after the ``n``-th sample: ``mu + (x - mu) / n``."""
    if n < 1:
        raise UsageError("n must be at least 1")
    return mu_prev + (x - mu_prev) / n


def incremental_scaled_variance(v_prev, x, mu_prev, mu_new):
    """Running sum of squared deviations: ``v + (x - mu_prev)(x - mu_new)``."""
    return v_prev + (x - mu_prev) * (x - mu_new)


def resample(series, length: int) -> np.ndarray:
    """Linearly resample a series onto ``length`` uniform samples of [0, 1]."""
    y = as_series(series)
    if y.shape[0] == length:
        return y
    src = np.linspace(0.0, 1.0, y.shape[0])
    dst = np.linspace(0.0, 1.0, length)
    return np.stack([np.interp(dst, src, y[:, c]) for c in range(y.shape[1])], axis=1)


@dataclass
class ClusterState:
    id: int
    centroid: np.ndarray
    scaled_variance: np.ndarray
    size: int

    def std(self) -> float:
        """Per-entry residual standard deviation."""
        return float(np.sqrt(np.mean(self.scaled_variance / self.size)))


@dataclass
class ClusterModel:
    """Cluster states plus the settings of the assignment step.

    ``gate`` selects the radius rule: ``"std"`` (default) or ``"printed"``,
    which compares the distance against ``R * mean(v_k) * s_k``.
    ``use_alignment=False`` turns every distance into a plain Euclidean one.

    Clusters without a spread estimate (all ``v_k`` zero) use the pooled
    spread of the other clusters (``singleton_gate="pooled"``), or an
    unbounded gate for their first ``grace`` absorptions
    (``singleton_gate="grace"``).
    """

    clusters: list
    radius_factor: float = 2.0
    align_cfg: AlignConfig = field(default_factory=lambda: CLUSTER_ALIGN)
    length: int = 0
    n_channels: int = 1
    gate: str = "std"
    use_alignment: bool = True
    next_id: int = 0
    singleton_gate: str = "pooled"
    grace: int = 5

    def __post_init__(self):
        if not self.radius_factor > 0:
            raise UsageError("radius factor must be positive")
        if self.gate not in ("std", "printed"):
            raise UsageError("gate must be 'std' or 'printed'")
        if self.singleton_gate not in ("pooled", "grace"):
            raise UsageError("singleton_gate must be 'pooled' or 'grace'")

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    def pooled_std(self) -> float:
        """Residual standard deviation pooled over all clusters."""
        v = sum(float(np.sum(c.scaled_variance)) for c in self.clusters)
        s = sum(c.size for c in self.clusters) * self.length * self.n_channels
        return float(np.sqrt(v / s)) if s else 0.0

    def gates(self) -> np.ndarray:
        R = self.radius_factor
        if self.gate == "printed":
            return np.array([R * float(np.mean(c.scaled_variance)) * c.size
                             for c in self.clusters])
        pooled = self.pooled_std()
        out = []
        for c in self.clusters:
            if np.any(c.scaled_variance > 0):
                out.append(R * c.std())
            elif self.singleton_gate == "grace" and c.size <= self.grace:
                out.append(np.inf)
            else:
                # no spread estimate yet: borrow the pooled one
                out.append(R * pooled)
        return np.array(out)


def _distances(series_stack: np.ndarray, centroids: np.ndarray, cfg: AlignConfig,
               use_alignment: bool):
    """Pairwise distances between ``series_stack[p]`` and ``centroids[p]``.

    Returns RMS elastic distances, RMS aligned residuals and the series
    aligned towards their centroids.
    """
    P, n, ch = centroids.shape
    if use_alignment:
        loss, _, warped = _pairwise(make_aligner(cfg), centroids, series_stack, cfg)
    else:
        warped = series_stack
        loss = np.sum((series_stack - centroids) ** 2, axis=(1, 2))
    resid = np.sum((warped - centroids) ** 2, axis=(1, 2))
    scale = float(n * ch)
    return np.sqrt(np.maximum(loss, 0.0) / scale), np.sqrt(resid / scale), warped


def _all_pairs(X: np.ndarray, C: np.ndarray, cfg, use_alignment):
    """Distances of every series in ``X`` to every centroid in ``C``."""
    N, K = X.shape[0], C.shape[0]
    xs = np.repeat(X, K, axis=0)
    cs = np.tile(C, (N, 1, 1))
    d, _, warped = _distances(xs, cs, cfg, use_alignment)
    return d.reshape(N, K), warped.reshape((N, K) + X.shape[1:])


def _seed_centroids(X, k, rng, cfg, use_alignment, init):
    N = X.shape[0]
    if init == "random":
        return X[np.sort(rng.choice(N, size=k, replace=False))].copy()
    # distance-squared weighted selection
    chosen = [int(rng.integers(N))]
    best = None
    for _ in range(1, k):
        d, _ = _all_pairs(X, X[chosen[-1:]], cfg, use_alignment)
        best = d[:, 0] if best is None else np.minimum(best, d[:, 0])
        weights = best**2
        weights[chosen] = 0.0
        total = weights.sum()
        if total <= 0:
            free = np.setdiff1d(np.arange(N), chosen)
            chosen.append(int(rng.choice(free)))
        else:
            chosen.append(int(rng.choice(N, p=weights / total)))
    return X[chosen].copy()


def warmup(buffer, k: int, n_init: int = 3, n_iter: int = 5, cfg: AlignConfig | None = None,
           radius_factor: float = 2.0, seed: int = 0, init: str = "kmeans++",
           use_alignment: bool = True, gate: str = "std", length: int | None = None):
    """Elastic K-means on the buffer; the lowest within-cluster sum of squares
    over ``n_init`` seeded restarts wins.

    Returns ``(model, labels)`` where ``labels`` are the buffer assignments.
    """
    cfg = cfg or CLUSTER_ALIGN
    if k < 1 or len(buffer) < k:
        raise InsufficientData(f"need at least k={k} series in the warm-up buffer")
    if init not in ("kmeans++", "random"):
        raise UsageError("init must be 'kmeans++' or 'random'")
    length = int(length or as_series(buffer[0]).shape[0])
    X = np.stack([resample(s, length) for s in buffer])
    ch = X.shape[2]
    if any(as_series(s).shape[1] != ch for s in buffer):
        raise ShapeMismatch("all series need the same channel count")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(int(n_init)):
        C = _seed_centroids(X, k, rng, cfg, use_alignment, init)
        for _ in range(int(n_iter)):
            d, warped = _all_pairs(X, C, cfg, use_alignment)
            lab = np.argmin(d, axis=1)
            for j in range(k):
                members = lab == j
                if np.any(members):
                    C[j] = warped[members, j].mean(axis=0)
        d, warped = _all_pairs(X, C, cfg, use_alignment)
        lab = np.argmin(d, axis=1)
        wcss = float(np.sum(d[np.arange(len(X)), lab] ** 2))
        if best is None or wcss < best[0]:
            best = (wcss, C.copy(), lab.copy(), warped.copy())
    _, C, lab, warped = best
    clusters = []
    for j in range(k):
        members = lab == j
        if np.any(members):
            Y = warped[members, j]
            mean = Y.mean(axis=0)
            clusters.append(ClusterState(len(clusters), mean, np.sum((Y - mean) ** 2, axis=0),
                                         int(members.sum())))
    # relabel buffer members onto the compacted ids
    remap = {}
    for j in range(k):
        if np.any(lab == j):
            remap[j] = len(remap)
    labels = np.array([remap[j] for j in lab])
    model = ClusterModel(clusters, radius_factor, cfg, length, ch, gate, use_alignment,
                         next_id=len(clusters))
    return model, labels


@dataclass(frozen=True)
class Assignment:
    cluster_id: int
    created: bool
    distance: float


def assign(model: ClusterModel, x) -> Assignment:
    """Route one series into the model, updating it in place."""
    y = resample(x, model.length)
    if y.shape[1] != model.n_channels:
        raise ShapeMismatch("series channel count does not match the model")
    if not model.clusters:
        return _create(model, y, 0.0)
    C = np.stack([c.centroid for c in model.clusters])
    d, resid, warped = _distances(np.repeat(y[None], len(C), axis=0), C, model.align_cfg,
                                  model.use_alignment)
    cand = resid <= model.gates()
    if not np.any(cand):
        return _create(model, y, float(d.min()))
    k = int(np.argmin(np.where(cand, d, np.inf)))
    state = model.clusters[k]
    aligned = warped[k]
    state.size += 1
    old = state.centroid
    new = incremental_mean(old, aligned, state.size)
    state.scaled_variance = incremental_scaled_variance(state.scaled_variance, aligned, old, new)
    state.centroid = new
    return Assignment(state.id, False, float(d[k]))


def _create(model: ClusterModel, y: np.ndarray, distance: float) -> Assignment:
    state = ClusterState(model.next_id, y.copy(), np.zeros_like(y), 1)
    model.next_id += 1
    model.clusters.append(state)
    return Assignment(state.id, True, distance)


def run_stream(stream, warmup_size: int = 60, k: int = 8, radius_factor: float = 2.0,
               n_init: int = 3, n_iter: int = 5, cfg: AlignConfig | None = None, seed: int = 0,
               use_alignment: bool = True, gate: str = "std", init: str = "kmeans++"):
    """Warm up on the first ``warmup_size`` series, then assign the rest.

    Returns ``(model, assignments)`` with one :class:`Assignment` per input
    series in arrival order; warm-up members report ``created=False``.
    """
    stream = list(stream)
    if len(stream) < warmup_size:
        raise InsufficientData(f"stream has {len(stream)} series, warm-up needs {warmup_size}")
    buffer = stream[:warmup_size]
    model, labels = warmup(buffer, k, n_init, n_iter, cfg, radius_factor, seed, init,
                           use_alignment, gate)
    X = np.stack([resample(s, model.length) for s in buffer])
    C = np.stack([c.centroid for c in model.clusters])
    d, _, _ = _distances(X, C[labels], model.align_cfg, use_alignment)
    out = [Assignment(int(model.clusters[j].id), False, float(dist))
           for j, dist in zip(labels, d)]
    for x in stream[warmup_size:]:
        out.append(assign(model, x))
    return model, out


def adjusted_rand(labels_true, labels_pred) -> float:
    """Adjusted Rand index between two labelings."""
    return float(adjusted_rand_score(np.asarray(labels_true), np.asarray(labels_pred)))
