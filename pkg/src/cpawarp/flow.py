"""Closed-form integration of 1-D CPA velocity fields.

Inside one cell the ODE ``dx/dt = a x + b`` has the solution
``psi(x, t) = x e^{ta} + t b E(ta)`` with ``E(z) = (e^z - 1) / z``.  A
trajectory is advanced cell by cell: while the time needed to reach the
boundary in the direction of motion is shorter than the remaining time, the
point jumps to that boundary and continues in the neighbouring cell.

All routines are vectorised over points and over a batch of parameter
vectors.  The visited cells are kept in a traversal record that the
derivative routines in :mod:`cpawarp.grad` reuse without re-integrating.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import fastexp
from .basis import AffineCoeffs, CpaBasis, Tessellation, _cell_index, affine_batch
from .errors import DimensionMismatch, IterationOverflow, OutOfDomain, UsageError

__all__ = [
    "FlowConfig",
    "TraversalStep",
    "TraversalRecord",
    "TraversalBatch",
    "velocity_at",
    "hitting_time",
    "integrate",
    "integrate_grid",
    "integrate_batch",
    "integrate_inverse",
]

_E_SERIES_CUTOFF = 1e-3
_LOG_SERIES_CUTOFF = 1e-6


@dataclass(frozen=True)
class FlowConfig:
    """Integration settings.

    ``epsilon_slope`` is relative: slopes with
    ``|a| <= epsilon_slope * max(1, max_c |a_c|)`` are treated as zero.
    ``max_iter`` defaults to ``N_P + 2``.  ``exp`` selects the exponential
    kernel, ``"native"`` or ``"fmath"``.
    """

    time: float = 1.0
    epsilon_slope: float = 1e-10
    max_iter: int | None = None
    exp: str = "native"

    def __post_init__(self):
        if not np.isfinite(self.time):
            raise UsageError("integration time must be finite")
        if not self.epsilon_slope > 0:
            raise UsageError("epsilon_slope must be positive")
        if self.max_iter is not None and self.max_iter < 1:
            raise UsageError("max_iter must be a positive integer")
        if self.exp not in ("native", "fmath"):
            raise UsageError(f"unknown exponential kernel {self.exp!r}")


# -- scalar building blocks -------------------------------------------------


def _exp(z, kind: str = "native"):
    return fastexp.exp_fmath(z) if kind == "fmath" else np.exp(z)


def exp_ratio(z, kind: str = "native"):
    """``(e^z - 1) / z`` with its limit 1 at ``z = 0``."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < _E_SERIES_CUTOFF
    if kind != "fmath" and z.ndim and not small.any():
        return np.expm1(z) / z
    zs = np.where(small, 1.0, z)
    if kind == "fmath":
        big = (_exp(zs, kind) - 1.0) / zs
    else:
        big = np.expm1(zs) / zs
    series = 1.0 + z * (0.5 + z * (1.0 / 6 + z * (1.0 / 24 + z / 120)))
    return np.where(small, series, big)


def exp_ratio2(z, kind: str = "native"):
    """``(e^z (z - 1) + 1) / z^2`` with its limit 1/2 at ``z = 0``.

    Appears in the slope derivative of the cell solution.
    """
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-2
    zs = np.where(small, 1.0, z)
    if kind == "fmath":
        em1 = _exp(zs, kind) - 1.0
    else:
        em1 = np.expm1(zs)
    big = (em1 * (zs - 1.0) + zs) / (zs * zs)
    series = 0.5 + z * (1.0 / 3 + z * (1.0 / 8 + z * (1.0 / 30 + z * (1.0 / 144 + z / 840))))
    return np.where(small, series, big)


def _log_ratio(u):
    """``log(1 + u) / u`` for ``u > -1`` with limit 1 at 0."""
    small = np.abs(u) < _LOG_SERIES_CUTOFF
    us = np.where(small, 1.0, u)
    return np.where(small, 1.0 - 0.5 * u + u * u / 3.0, np.log1p(us) / us)


def cell_solution(x, t, a, b, kind: str = "native"):
    """``psi(x, t)`` for one affine cell, valid for any slope including 0."""
    ta = t * a
    return x * _exp(ta, kind) + t * b * exp_ratio(ta, kind)


def _hit_time(a, b, x, xc):
    """Vectorised hitting time; ``a`` already has near-zero slopes zeroed."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        vx = a * x + b
        vc = a * xc + b
        dx = xc - x
        step = dx / vx
        t = step * _log_ratio(a * step)
    return np.where(vx * vc > 0, t, np.inf)


def hitting_time(a: float, b: float, x: float, x_c: float, epsilon: float = 1e-10):
    """Time for ``dx/dt = a x + b`` started at ``x`` to reach ``x_c``.

    Returns ``+inf`` if the velocity vanishes or changes sign before the
    boundary is reached.

    >>> round(float(hitting_time(1.0, 0.0, 0.25, 0.5)), 4)
    0.6931
    """
    a = np.asarray(a, dtype=float)
    a = np.where(np.abs(a) <= epsilon, 0.0, a)
    out = _hit_time(a, np.asarray(b, dtype=float), np.asarray(x, dtype=float),
                    np.asarray(x_c, dtype=float))
    return float(out) if out.ndim == 0 else out


def velocity_at(coeffs: AffineCoeffs, tess: Tessellation, x):
    """Evaluate the CPA velocity ``a_c x + b_c`` at ``x`` (scalar or array)."""
    xa = np.asarray(x, dtype=float)
    if not np.all(tess.contains(xa)):
        raise OutOfDomain(f"point(s) outside [{tess.x_min}, {tess.x_max}]")
    c = _cell_index(tess, xa)
    v = coeffs.rows[c, 0] * xa + coeffs.rows[c, 1]
    return float(v) if v.ndim == 0 else v


# -- traversal records ------------------------------------------------------


@dataclass(frozen=True)
class TraversalStep:
    cell: int
    x_entry: float
    t_remaining: float
    t_hit: float


@dataclass(frozen=True)
class TraversalRecord:
    """Cells visited by one trajectory, in order.

    The last step is the cell where the trajectory ends; its ``t_hit`` is the
    boundary time that was not reached (possibly ``inf``).  Hence
    ``sum(s.t_hit for s in steps[:-1]) + t_final == time``.
    """

    steps: tuple
    x_final: float
    t_final: float
    phi: float
    x0: float
    theta: np.ndarray = field(repr=False)
    time: float = 1.0
    coeffs: np.ndarray = field(default=None, repr=False)
    exp_kind: str = "native"

    @property
    def m(self) -> int:
        return len(self.steps)

    @property
    def cells(self) -> list[int]:
        return [s.cell for s in self.steps]


@dataclass
class TraversalBatch:
    """Vectorised traversal records for ``S`` fields times ``n`` points.

    Arrays are flattened over ``P = S * n`` trajectories.  Crossing steps are
    stored padded as ``(M, P)`` arrays; ``n_cross[p]`` of them are valid.
    """

    thetas: np.ndarray
    time: float
    sign: float
    shape: tuple
    field: np.ndarray
    x0: np.ndarray
    A: np.ndarray  # (S, N_P, 2) coefficients used internally (sign applied, slopes thresholded)
    first_cell: np.ndarray
    cross_cell: np.ndarray
    cross_x: np.ndarray
    cross_trem: np.ndarray
    cross_thit: np.ndarray
    cross_xc: np.ndarray
    n_cross: np.ndarray
    cell: np.ndarray
    x_final: np.ndarray
    t_final: np.ndarray
    t_hit_final: np.ndarray
    phi: np.ndarray
    exp_kind: str = "native"

    def __len__(self) -> int:
        return self.x0.size

    def __getitem__(self, p: int) -> TraversalRecord:
        if p < 0:
            p += len(self)
        steps = []
        for j in range(int(self.n_cross[p])):
            steps.append(TraversalStep(int(self.cross_cell[j, p]), float(self.cross_x[j, p]),
                                       float(self.cross_trem[j, p]), float(self.cross_thit[j, p])))
        steps.append(TraversalStep(int(self.cell[p]), float(self.x_final[p]),
                                   float(self.t_final[p]), float(self.t_hit_final[p])))
        return TraversalRecord(tuple(steps), float(self.x_final[p]), float(self.t_final[p]),
                               float(self.phi[p]), float(self.x0[p]),
                               self.thetas[self.field[p]].copy(), self.time,
                               self.A[self.field[p]].copy(), self.exp_kind)

    def __iter__(self) -> Iterator[TraversalRecord]:
        return (self[p] for p in range(len(self)))

    @property
    def m(self) -> np.ndarray:
        return self.n_cross + 1


# -- integration kernel -----------------------------------------------------


def _effective_slopes(A: np.ndarray, epsilon: float) -> np.ndarray:
    """Zero out slopes below the relative threshold, per field."""
    scale = np.maximum(1.0, np.abs(A[:, :, 0]).max(axis=1, keepdims=True))
    A = A.copy()
    A[:, :, 0] = np.where(np.abs(A[:, :, 0]) <= epsilon * scale, 0.0, A[:, :, 0])
    return A


def _start_cells(tess, A, f, x):
    c = _cell_index(tess, x)
    # points on a shared vertex start in the cell they move into
    j = c + 1
    on_vertex = (j < tess.n_cells) & (x == tess.boundaries[np.minimum(j, tess.n_cells)])
    if np.any(on_vertex):
        jj = j[on_vertex]
        xv = x[on_vertex]
        v = A[f[on_vertex], jj, 0] * xv + A[f[on_vertex], jj, 1]
        c = c.copy()
        c[on_vertex] = np.where(v >= 0, jj, jj - 1)
    return c


def _integrate_core(tess: Tessellation, A: np.ndarray, f: np.ndarray, x0: np.ndarray,
                    time: float, max_iter: int, kind: str, pinned: np.ndarray | None = None,
                    keep_record: bool = True):
    n_cells = tess.n_cells
    bounds = tess.boundaries
    P = x0.size
    coeffs = A.reshape(-1, 2)
    row0 = f * n_cells
    c = _start_cells(tess, A, f, x0)
    first = c.copy()
    x = x0.copy()
    t_rem = np.full(P, float(time))
    phi = np.empty(P)
    t_hit_final = np.empty(P)
    n_cross = np.zeros(P, dtype=np.int64)
    log = []
    active = None  # None stands for every trajectory
    for it in range(max_iter + 1):
        if active is not None and active.size == 0:
            break
        if it == max_iter:
            raise IterationOverflow(f"trajectory exceeded {max_iter} cells")
        if active is None:
            ca, xa, tr = c, x, t_rem
            ab = coeffs[row0 + c]
        else:
            ca, xa, tr = c[active], x[active], t_rem[active]
            ab = coeffs[row0[active] + ca]
        a = ab[:, 0]
        b = ab[:, 1]
        v = a * xa + b
        if it == 0 and pinned is not None:
            v[pinned] = 0.0
        right = v >= 0
        xc = bounds[ca + right]
        th = _hit_time(a, b, xa, xc)
        th[np.where(right, ca == n_cells - 1, ca == 0) | (v == 0)] = np.inf
        stop = th >= tr
        s_idx = np.flatnonzero(stop)
        g_idx = np.flatnonzero(~stop)
        done = s_idx if active is None else active[s_idx]
        if done.size:
            xs_, ts_ = xa.take(s_idx), tr.take(s_idx)
            t_hit_final[done] = th.take(s_idx)
            out = cell_solution(xs_, ts_, a.take(s_idx), b.take(s_idx), kind)
            phi[done] = np.where(v.take(s_idx) == 0, xs_, out)
        moving = g_idx if active is None else active[g_idx]
        if moving.size == 0:
            break
        th_go, xc_go, c_go = th.take(g_idx), xc.take(g_idx), ca.take(g_idx)
        tr_go = tr.take(g_idx)
        if keep_record:
            log.append((moving, c_go, xa.take(g_idx), tr_go, th_go, xc_go))
        t_rem[moving] = tr_go - th_go
        x[moving] = xc_go
        c[moving] = c_go + np.where(right.take(g_idx), 1, -1)
        n_cross[moving] += 1
        active = moving
    M = len(log)
    cross = [np.full((M, P), -1, dtype=np.int64)] + [np.full((M, P), np.nan) for _ in range(4)]
    for j, entry in enumerate(log):
        for arr, val in zip(cross, entry[1:]):
            arr[j, entry[0]] = val
    return dict(
        first_cell=first,
        cross_cell=cross[0],
        cross_x=cross[1],
        cross_trem=cross[2],
        cross_thit=cross[3],
        cross_xc=cross[4],
        n_cross=n_cross,
        cell=c,
        x_final=x,
        t_final=t_rem,
        t_hit_final=t_hit_final,
        phi=phi,
    )


def _integrate_phi(tess: Tessellation, A: np.ndarray, f: np.ndarray, x0: np.ndarray,
                   time: float, max_iter: int, kind: str, pinned: np.ndarray | None = None):
    """Forward-only variant of :func:`_integrate_core` that keeps no record.

    A one-dimensional trajectory is monotone, so a cell solution that ends
    inside its own cell needs no hitting time; only escaping points pay for
    the logarithm.
    """
    n_cells = tess.n_cells
    lo_bound = tess.boundaries.copy()
    hi_bound = tess.boundaries[1:].copy()
    lo_bound[0] = -np.inf
    hi_bound[-1] = np.inf
    slopes = A[:, :, 0].ravel()
    intercepts = A[:, :, 1].ravel()
    phi = np.empty(x0.size)
    ca = _start_cells(tess, A, f, x0)
    rows = f * n_cells + ca
    xa = x0
    tr = np.full(x0.size, float(time))
    idx = None  # trajectory ids of the active subset; None means all
    for it in range(max_iter + 1):
        if it == max_iter:
            raise IterationOverflow(f"trajectory exceeded {max_iter} cells")
        a = slopes.take(rows)
        b = intercepts.take(rows)
        v = a * xa + b
        if it == 0 and pinned is not None:
            v[pinned] = 0.0
        psi = xa + tr * v * exp_ratio(tr * a, kind)
        settled = (v == 0) | ((psi >= lo_bound.take(ca)) & (psi <= hi_bound.take(ca)))
        if idx is None:
            phi[settled] = psi[settled]
            e = np.flatnonzero(~settled)
            idx_e = e
        else:
            phi[idx[settled]] = psi[settled]
            e = np.flatnonzero(~settled)
            idx_e = idx.take(e)
        if e.size == 0:
            break
        ae, be, xe, ce, te = a.take(e), b.take(e), xa.take(e), ca.take(e), tr.take(e)
        right = v.take(e) > 0
        xc = tess.boundaries.take(ce + right)
        th = _hit_time(ae, be, xe, xc)
        stop = th >= te
        phi[idx_e[stop]] = psi.take(e)[stop]
        go = ~stop
        idx = idx_e[go]
        if idx.size == 0:
            break
        step = np.where(right[go], 1, -1)
        ca = ce[go] + step
        rows = rows.take(e)[go] + step
        xa = xc[go]
        tr = te[go] - th[go]
    return phi


def integrate_batch(basis: CpaBasis, thetas, xs, cfg: FlowConfig | None = None,
                    record: bool = True):
    """Integrate points under a batch of fields.

    Parameters
    ----------
    thetas : array (S, d) or (d,)
    xs : array (n,) shared by every field, or (S, n)
    record : keep the traversal needed by the derivative routines

    Returns
    -------
    phis : array (S, n)
    batch : TraversalBatch, or None when ``record`` is false
    """
    cfg = cfg or FlowConfig()
    thetas = np.asarray(thetas, dtype=float)
    if thetas.ndim == 1:
        thetas = thetas[None]
    if thetas.ndim != 2 or thetas.shape[1] != basis.d:
        raise DimensionMismatch(f"thetas must have shape (S, {basis.d})")
    S = thetas.shape[0]
    xs = np.asarray(xs, dtype=float)
    if xs.ndim <= 1:
        xs = np.broadcast_to(np.atleast_1d(xs), (S, np.atleast_1d(xs).size))
    if xs.ndim != 2 or xs.shape[0] != S:
        raise DimensionMismatch("xs must have shape (n,) or (S, n)")
    tess = basis.tess
    if not np.all(tess.contains(xs)):
        raise OutOfDomain(f"point(s) outside [{tess.x_min}, {tess.x_max}]")
    sign = -1.0 if cfg.time < 0 else 1.0
    time = abs(float(cfg.time))
    A = _effective_slopes(affine_batch(basis, sign * thetas), cfg.epsilon_slope)
    n = xs.shape[1]
    f = np.repeat(np.arange(S), n)
    x0 = np.ascontiguousarray(xs).reshape(-1).copy()
    max_iter = cfg.max_iter or tess.n_cells + 2
    pinned = None
    if basis.zero_boundary:
        # the velocity vanishes at the domain ends by construction
        pinned = (x0 == tess.x_min) | (x0 == tess.x_max)
    if not record:
        phi = _integrate_phi(tess, A, f, x0, time, max_iter, cfg.exp, pinned)
        if basis.zero_boundary:
            np.clip(phi, tess.x_min, tess.x_max, out=phi)
        return phi.reshape(S, n), None
    arrays = _integrate_core(tess, A, f, x0, time, max_iter, cfg.exp, pinned)
    if basis.zero_boundary:
        np.clip(arrays["phi"], tess.x_min, tess.x_max, out=arrays["phi"])
    batch = TraversalBatch(thetas=thetas.copy(), time=float(cfg.time), sign=sign, shape=(S, n),
                           field=f, x0=x0, A=A, exp_kind=cfg.exp, **arrays)
    return batch.phi.reshape(S, n), batch


def integrate(basis: CpaBasis, theta, x: float, cfg: FlowConfig | None = None):
    """Integrate a single point; returns ``(phi, TraversalRecord)``."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise DimensionMismatch("theta must be a vector")
    phis, batch = integrate_batch(basis, theta, np.array([float(x)]), cfg)
    return float(phis[0, 0]), batch[0]


def integrate_grid(basis: CpaBasis, theta, xs, cfg: FlowConfig | None = None):
    """Integrate every point of ``xs``; returns ``(phis, records)``.

    ``records`` is a :class:`TraversalBatch`, which behaves as a sequence of
    :class:`TraversalRecord` and is accepted directly by the derivative
    routines.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise DimensionMismatch("theta must be a vector")
    xs = np.asarray(xs, dtype=float)
    phis, batch = integrate_batch(basis, theta, xs.reshape(-1), cfg)
    return phis[0].reshape(xs.shape), batch


def integrate_inverse(basis: CpaBasis, theta, y, cfg: FlowConfig | None = None):
    """Inverse warp, computed as the flow of the negated field."""
    theta = -np.asarray(theta, dtype=float)
    y = np.asarray(y, dtype=float)
    phis, _ = integrate_grid(basis, theta, y.reshape(-1), cfg)
    return float(phis[0]) if y.ndim == 0 else phis.reshape(y.shape)
