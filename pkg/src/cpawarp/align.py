"""Elastic alignment of time series with CPA warps.

A series ``y`` with ``n`` samples lives on a uniform time axis over
``[0, 1]``.  Warping by ``theta`` evaluates the flow ``phi`` on an output grid
and samples ``y`` at ``phi(x_j)`` by linear interpolation, clamping at the
ends.  Losses and their gradients are assembled from the interpolation
slopes and the closed-form ``d phi / d theta``.

Optimisation is plain gradient descent with step halving whenever a step
would increase the loss; the best iterate is always kept, so the identity
warp (``theta = 0``) is never beaten by a worse answer.  The descent runs in
prior-whitened coordinates ``theta = C w`` with ``C C^T = Sigma_CPA``, which
turns the penalty ``theta^T Sigma_CPA^{-1} theta`` into ``|w|^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .basis import CpaBasis, PriorConfig, make_basis, make_tessellation, prior_covariance
from .errors import DimensionMismatch, EmptyClass, NonFinite, ShapeMismatch, UsageError
from .flow import FlowConfig, integrate_batch
from .grad import flow_derivatives

__all__ = [
    "AlignConfig",
    "AlignResult",
    "Aligner",
    "as_series",
    "warp_series",
    "elastic_distance",
    "symmetric_elastic_distance",
    "joint_align",
    "joint_loss",
    "elastic_mean",
    "set_variance",
    "variance_reduction",
]


def as_series(values) -> np.ndarray:
    """Return a ``(n_samples, n_channels)`` float array."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ShapeMismatch("a series needs shape (n_samples >= 2, n_channels)")
    if not np.all(np.isfinite(arr)):
        raise NonFinite("series contains non-finite values")
    return arr


@dataclass(frozen=True)
class AlignConfig:
    n_cells: int = 16
    basis_kind: str = "svd"
    zero_boundary: bool = True
    learning_rate: float = 1e-2
    n_iters: int = 500
    lambda_sigma: float = 1.0
    lambda_s: float = 0.1
    output_length: int | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise UsageError("learning_rate must be positive")
        if int(self.n_iters) != self.n_iters or self.n_iters < 1:
            raise UsageError("n_iters must be a positive integer")
        if self.output_length is not None and self.output_length < 2:
            raise UsageError("output_length must be at least 2")


@dataclass(frozen=True)
class Aligner:
    """Basis, prior factor and grids shared by every alignment call."""

    basis: CpaBasis
    chol: np.ndarray = field(repr=False)
    precision: np.ndarray = field(repr=False)

    @property
    def d(self) -> int:
        return self.basis.d

    def theta_from_white(self, w: np.ndarray) -> np.ndarray:
        return w @ self.chol.T

    def white_from_theta(self, theta: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.chol, np.asarray(theta, dtype=float).T).T

    def penalty(self, theta) -> np.ndarray:
        theta = np.atleast_2d(theta)
        return np.einsum("pi,ij,pj->p", theta, self.precision, theta)


@lru_cache(maxsize=32)
def _aligner(n_cells, kind, zero_boundary, lambda_sigma, lambda_s) -> Aligner:
    basis = make_basis(make_tessellation(0.0, 1.0, n_cells), kind, zero_boundary)
    cov = prior_covariance(basis, PriorConfig(lambda_sigma, lambda_s))
    cov = cov + 1e-10 * lambda_sigma * np.eye(basis.d)
    chol = np.linalg.cholesky(cov)
    inv_chol = np.linalg.inv(chol)
    chol.setflags(write=False)
    precision = inv_chol.T @ inv_chol
    precision.setflags(write=False)
    return Aligner(basis, chol, precision)


def make_aligner(cfg: AlignConfig) -> Aligner:
    return _aligner(int(cfg.n_cells), str(cfg.basis_kind), bool(cfg.zero_boundary),
                    float(cfg.lambda_sigma), float(cfg.lambda_s))


def _sample(series: np.ndarray, pos: np.ndarray):
    """Linear interpolation of ``series`` (P, n, ch) at ``pos`` (P, L) in [0, 1].

    Returns values and slopes with respect to ``pos``; positions outside the
    unit interval are clamped and get zero slope.
    """
    P, n, _ = series.shape
    inside = (pos >= 0.0) & (pos <= 1.0)
    u = np.clip(pos, 0.0, 1.0) * (n - 1)
    # snap rounding noise so positions on shared knots return the knot value
    knot = np.rint(u)
    u = np.where(np.abs(u - knot) <= 4 * np.finfo(float).eps * (n - 1), knot, u)
    j = np.clip(np.floor(u).astype(np.int64), 0, n - 2)
    w = (u - j)[..., None]
    rows = np.arange(P)[:, None]
    y0 = series[rows, j]
    y1 = series[rows, j + 1]
    vals = y0 * (1.0 - w) + y1 * w
    slope = (y1 - y0) * (n - 1) * inside[..., None]
    return vals, slope


def _warp_with_grad(al: Aligner, thetas: np.ndarray, series: np.ndarray, length: int,
                    need_grad: bool = True):
    grid = np.linspace(0.0, 1.0, length)
    phi, rec = integrate_batch(al.basis, thetas, grid)
    vals, slope = _sample(series, phi)
    if not need_grad:
        return vals, None, None
    dphi = flow_derivatives(al.basis, thetas, rec, second_order=False).d_theta
    return vals, slope, dphi


def warp_series(series, basis: CpaBasis, theta, output_length: int | None = None) -> np.ndarray:
    """Sample ``series`` at the warped grid ``phi(x_j)``.

    ``output_length`` defaults to the input length.  The result keeps the
    dimensionality of the input (1-D in, 1-D out).
    """
    raw = np.asarray(series, dtype=float)
    y = as_series(raw)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (basis.d,):
        raise DimensionMismatch(f"theta must have length {basis.d}")
    if basis.tess.x_min != 0.0 or basis.tess.x_max != 1.0:
        raise DimensionMismatch("alignment bases must live on [0, 1]")
    length = int(output_length or y.shape[0])
    phi, _ = integrate_batch(basis, theta, np.linspace(0.0, 1.0, length))
    vals, _ = _sample(y[None], phi)
    out = vals[0]
    return out[:, 0] if raw.ndim == 1 else out


def _descend(objective, w0: np.ndarray, lr: float, n_iters: int, per_problem: bool):
    """Gradient descent with halving on increase and best-so-far retention.

    ``objective(w)`` returns ``(loss, grad)``; with ``per_problem`` the losses
    are a vector and each row of ``w`` is an independent problem.
    """
    w = w0.copy()
    loss, grad = objective(w)
    if not np.all(np.isfinite(loss)) or not np.all(np.isfinite(grad)):
        raise NonFinite("loss is not finite at the identity warp")
    trace = [loss.copy() if per_problem else float(loss)]
    step = np.full(w.shape[0], lr) if per_problem else lr
    for _ in range(int(n_iters) - 1 if n_iters > 1 else 0):
        cand = w - (step[:, None] if per_problem else step) * grad
        # oversized steps may overflow; such candidates are rejected below
        with np.errstate(over="ignore", invalid="ignore"):
            c_loss, c_grad = objective(cand)
        ok = np.isfinite(c_loss) & (c_loss <= loss)
        if per_problem:
            ok &= np.all(np.isfinite(c_grad), axis=1)
            w = np.where(ok[:, None], cand, w)
            grad = np.where(ok[:, None], c_grad, grad)
            loss = np.where(ok, c_loss, loss)
            step = np.where(ok, step, 0.5 * step)
            trace.append(loss.copy())
        else:
            if ok and np.all(np.isfinite(c_grad)):
                w, loss, grad = cand, float(c_loss), c_grad
            else:
                step *= 0.5
            trace.append(float(loss))
        if np.all(step < 1e-14):
            break
    return w, loss, trace


def _pairwise(al: Aligner, targets: np.ndarray, sources: np.ndarray, cfg: AlignConfig,
              lr: float | None = None, n_iters: int | None = None):
    """Warp each ``sources[p]`` towards ``targets[p]`` independently.

    ``targets`` has shape (P, L, ch) and ``sources`` (P, n, ch).
    Returns ``(objective, thetas, warped)``.
    """
    P, L, _ = targets.shape

    def objective(w):
        thetas = al.theta_from_white(w)
        vals, slope, dphi = _warp_with_grad(al, thetas, sources, L)
        resid = vals - targets
        loss = np.einsum("plc,plc->p", resid, resid) + np.einsum("pd,pd->p", w, w)
        g_phi = 2.0 * np.einsum("plc,plc->pl", resid, slope)
        g_theta = np.einsum("pl,pld->pd", g_phi, dphi)
        return loss, g_theta @ al.chol + 2.0 * w

    w, loss, _ = _descend(objective, np.zeros((P, al.d)), lr or cfg.learning_rate,
                          n_iters or cfg.n_iters, per_problem=True)
    thetas = al.theta_from_white(w)
    warped, _, _ = _warp_with_grad(al, thetas, sources, L, need_grad=False)
    return loss, thetas, warped


def elastic_distance(a, b, cfg: AlignConfig | None = None):
    """Warp ``b`` towards ``a``; returns ``(distance, theta)``.

    The distance is the final objective
    ``|a - b o phi|^2 + theta^T Sigma^{-1} theta``, so at ``theta = 0`` it is
    the squared Euclidean distance between the series.
    """
    cfg = cfg or AlignConfig()
    a = as_series(a)
    b = as_series(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch("series must have the same number of channels")
    al = make_aligner(cfg)
    loss, thetas, _ = _pairwise(al, a[None], b[None], cfg)
    return float(loss[0]), thetas[0]


def symmetric_elastic_distance(a, b, cfg: AlignConfig | None = None) -> float:
    """Mean of the two directed elastic distances."""
    return 0.5 * (elastic_distance(a, b, cfg)[0] + elastic_distance(b, a, cfg)[0])


@dataclass
class AlignResult:
    thetas: np.ndarray
    warped: np.ndarray
    centroid: np.ndarray
    loss_trace: list
    variance_before: float
    variance_after: float
    labels: np.ndarray | None = None
    centroids: dict = field(default_factory=dict)


def _stack(series_set) -> np.ndarray:
    items = [as_series(s) for s in series_set]
    if not items:
        raise EmptyClass("empty series set")
    shape = items[0].shape
    if any(s.shape != shape for s in items):
        raise ShapeMismatch("all series in a set must share shape")
    return np.stack(items)


def _class_index(labels, N):
    if labels is None:
        return np.zeros(N, dtype=np.int64), [None]
    labels = np.asarray(labels)
    if labels.shape != (N,):
        raise EmptyClass("labels must cover every series")
    classes, idx = np.unique(labels, return_inverse=True)
    return idx, list(classes)


def _set_mean(z: np.ndarray) -> np.ndarray:
    # shifted by the first member so identical members give an exact mean
    return z[0] + (z - z[0]).mean(axis=0)


def _within_class(z: np.ndarray, idx: np.ndarray, n_classes: int):
    """Per-class means and the summed within-class variances."""
    means = np.stack([_set_mean(z[idx == k]) for k in range(n_classes)])
    counts = np.bincount(idx, minlength=n_classes).astype(float)
    resid = z - means[idx]
    per_series = np.einsum("plc,plc->p", resid, resid)
    loss = float(np.sum(per_series / counts[idx]))
    return means, resid, counts, loss


def _pooled_variance(z: np.ndarray, idx: np.ndarray, n_classes: int) -> float:
    """Within-class squared deviation per series entry, pooled over classes."""
    means, resid, _, _ = _within_class(z, idx, n_classes)
    return float(np.mean(resid**2))


def _joint_data(al: Aligner, Y: np.ndarray, idx: np.ndarray, n_classes: int, length: int,
                thetas: np.ndarray):
    """Within-class variance term and its gradient with respect to ``thetas``."""
    vals, slope, dphi = _warp_with_grad(al, thetas, Y, length)
    _, resid, counts, data = _within_class(vals, idx, n_classes)
    # the class mean's own dependence cancels because residuals sum to zero
    g_phi = 2.0 * np.einsum("plc,plc->pl", resid, slope) / counts[idx][:, None]
    return data, np.einsum("pl,pld->pd", g_phi, dphi)


def joint_loss(series_set, thetas, labels=None, cfg: AlignConfig | None = None):
    """Joint alignment objective at ``thetas`` (N, d).

    Returns ``(data, penalty, grad)``: the summed within-class variance of
    the warped series, the mean prior penalty, and the gradient of their sum.
    """
    cfg = cfg or AlignConfig()
    Y = _stack(series_set)
    N, n, _ = Y.shape
    idx, classes = _class_index(labels, N)
    al = make_aligner(cfg)
    thetas = np.asarray(thetas, dtype=float)
    if thetas.shape != (N, al.d):
        raise DimensionMismatch(f"thetas must have shape ({N}, {al.d})")
    data, g_data = _joint_data(al, Y, idx, len(classes), int(cfg.output_length or n), thetas)
    penalty = float(np.mean(al.penalty(thetas)))
    return data, penalty, g_data + 2.0 * thetas @ al.precision / N


def joint_align(series_set, labels=None, cfg: AlignConfig | None = None) -> AlignResult:
    """Align every series of the set to its class mean.

    Minimises the summed within-class variance of the warped series plus
    the mean prior penalty over all series.
    """
    cfg = cfg or AlignConfig()
    Y = _stack(series_set)
    N, n, _ = Y.shape
    idx, classes = _class_index(labels, N)
    K = len(classes)
    L = int(cfg.output_length or n)
    al = make_aligner(cfg)

    def objective(w):
        data, g_theta = _joint_data(al, Y, idx, K, L, al.theta_from_white(w))
        loss = data + float(np.einsum("pd,pd->", w, w)) / N
        return loss, g_theta @ al.chol + 2.0 * w / N

    w, _, trace = _descend(objective, np.zeros((N, al.d)), cfg.learning_rate, cfg.n_iters,
                           per_problem=False)
    thetas = al.theta_from_white(w)
    warped, _, _ = _warp_with_grad(al, thetas, Y, L, need_grad=False)
    start, _, _ = _warp_with_grad(al, np.zeros_like(thetas), Y, L, need_grad=False)
    means, _, _, _ = _within_class(warped, idx, K)
    var_after = _pooled_variance(warped, idx, K)
    var_before = _pooled_variance(start, idx, K)
    return AlignResult(
        thetas=thetas,
        warped=warped,
        centroid=_set_mean(warped),
        loss_trace=trace,
        variance_before=var_before,
        variance_after=var_after,
        labels=None if labels is None else np.asarray(labels),
        centroids={c: means[k] for k, c in enumerate(classes)} if labels is not None else {},
    )


def elastic_mean(series_set, cfg: AlignConfig | None = None) -> np.ndarray:
    """Euclidean mean of the jointly aligned set."""
    return joint_align(series_set, None, cfg).centroid


def set_variance(series_set) -> float:
    """Mean squared deviation from the set mean, per series entry."""
    Y = _stack(series_set)
    return float(np.mean((Y - _set_mean(Y)) ** 2))


def variance_reduction(before, after) -> float:
    """``100 (Var_after - Var_before) / Var_before``; negative is a reduction."""
    B = _stack(before)
    A = _stack(after)
    if A.shape[0] != B.shape[0]:
        raise ShapeMismatch("sets must have the same number of series")
    vb = set_variance(B)
    va = set_variance(A)
    if vb == 0.0:
        return 0.0 if va == 0.0 else float("inf")
    return 100.0 * (va - vb) / vb
