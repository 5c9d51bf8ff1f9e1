"""Closed-form derivatives of the CPA flow.

All four derivative families are assembled from a traversal record, so the
backward pass never re-integrates.  Sensitivities are first accumulated per
cell, ``W_a[p, c] = d phi_p / d a_c`` and ``W_b[p, c] = d phi_p / d b_c``,
and then mapped to parameter space through the slope and intercept rows of
the basis.

Within one cell (slope ``a``, intercept ``b``, start ``x``, time ``t``):

* ``d psi / d a = t e^{ta} x + b t^2 H(ta)`` with ``H(z) = (e^z (z-1) + 1) / z^2``
* ``d psi / d b = t E(ta)`` with ``E(z) = (e^z - 1) / z``
* ``d psi / d t = e^{ta} (a x + b)``

Crossing a boundary ``x_c`` at time ``tau`` gives, by implicit
differentiation of ``psi(x, tau) = x_c``,
``d tau / d theta = -(d psi / d theta)(x, tau) / v(x_c)``.  These forms stay
finite and exact as ``a -> 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse

from .basis import CpaBasis
from .errors import DegenerateDenominator, RecordMismatch
from .flow import TraversalBatch, TraversalRecord, _exp, exp_ratio, exp_ratio2

__all__ = [
    "FlowDerivatives",
    "flow_derivatives",
    "grad_theta",
    "grad_space",
    "grad_space2",
    "grad_space_theta",
]


@dataclass(frozen=True)
class FlowDerivatives:
    """Derivatives of ``phi`` for every trajectory of a batch.

    ``d_theta`` and ``d2_theta_x`` have shape ``(..., d)``; the spatial terms
    share the leading shape of the points.
    """

    phi: np.ndarray
    d_theta: np.ndarray
    d_x: np.ndarray
    d2_x: np.ndarray | None
    d2_theta_x: np.ndarray | None


def _record_to_batch(rec: TraversalRecord) -> TraversalBatch:
    steps = rec.steps
    cross = steps[:-1]
    M = len(cross)
    col = lambda vals, dtype=float: np.array(vals, dtype=dtype).reshape(M, 1)  # noqa: E731
    xc = [s.x_entry for s in steps[1:]]
    last = steps[-1]
    sign = -1.0 if rec.time < 0 else 1.0
    return TraversalBatch(
        thetas=np.asarray(rec.theta, dtype=float)[None], time=rec.time, sign=sign, shape=(1, 1),
        field=np.zeros(1, dtype=np.int64), x0=np.array([rec.x0]), A=rec.coeffs[None],
        first_cell=np.array([steps[0].cell]), cross_cell=col([s.cell for s in cross], np.int64),
        cross_x=col([s.x_entry for s in cross]), cross_trem=col([s.t_remaining for s in cross]),
        cross_thit=col([s.t_hit for s in cross]), cross_xc=col(xc),
        n_cross=np.array([M]), cell=np.array([last.cell]), x_final=np.array([rec.x_final]),
        t_final=np.array([rec.t_final]), t_hit_final=np.array([last.t_hit]),
        phi=np.array([rec.phi]), exp_kind=rec.exp_kind,
    )


def _as_batch(theta, record):
    theta = np.asarray(theta, dtype=float)
    if isinstance(record, TraversalRecord):
        if record.coeffs is None:
            raise RecordMismatch("record carries no field coefficients")
        batch = _record_to_batch(record)
    elif isinstance(record, TraversalBatch):
        batch = record
    else:
        raise RecordMismatch(f"expected a traversal record, got {type(record).__name__}")
    want = theta[None] if theta.ndim == 1 else theta
    if want.shape != batch.thetas.shape or not np.array_equal(want, batch.thetas):
        raise RecordMismatch("traversal record was produced for different parameters")
    return batch


def _cell_terms(x, t, a, b, kind):
    """Cell solution sensitivities ``(d psi/d a, d psi/d b, e^{ta})``."""
    z = t * a
    ez = _exp(z, kind)
    dpsi_da = t * ez * x + b * t * t * exp_ratio2(z, kind)
    dpsi_db = t * exp_ratio(z, kind)
    return dpsi_da, dpsi_db, ez


def _derive(basis: CpaBasis, batch: TraversalBatch, second_order: bool):
    kind = batch.exp_kind
    A = batch.A
    f = batch.field
    P = f.size
    n_cells = basis.n_cells
    cm = batch.cell
    a_m = A[f, cm, 0]
    b_m = A[f, cm, 1]
    x_m = batch.x_final
    t_m = batch.t_final
    dpsi_da, dpsi_db, ez = _cell_terms(x_m, t_m, a_m, b_m, kind)
    v_phi = ez * (a_m * x_m + b_m)
    Ba, Bb = basis.slope_rows, basis.intercept_rows
    # sparse weights on the slope and intercept rows of every visited cell
    rows = [np.arange(P)] * 2
    cols = [cm, cm + n_cells]
    vals = [dpsi_da, dpsi_db]
    for j in range(batch.cross_cell.shape[0]):
        p = np.nonzero(batch.n_cross > j)[0]
        c = batch.cross_cell[j, p]
        a = A[f[p], c, 0]
        b = A[f[p], c, 1]
        xj = batch.cross_x[j, p]
        tau = batch.cross_thit[j, p]
        v_exit = a * batch.cross_xc[j, p] + b
        da, db, _ = _cell_terms(xj, tau, a, b, kind)
        # the remaining time in the final cell grows when this crossing is delayed
        scale = v_phi[p] / v_exit
        rows += [p, p]
        cols += [c, c + n_cells]
        vals += [scale * da, scale * db]
    weights = scipy.sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(P, 2 * n_cells))
    d_theta = np.asarray(weights @ np.vstack([Ba, Bb]))

    single = batch.n_cross == 0
    c1 = batch.first_cell
    a_1 = A[f, c1, 0]
    v_start = a_1 * batch.x0 + A[f, c1, 1]
    if np.any(~single & (v_start == 0)):
        raise DegenerateDenominator("trajectory left its first cell with zero start velocity")
    v1 = np.where(single, 1.0, v_start)
    d_x = np.where(single, ez, v_phi / v1)
    if not second_order:
        return d_theta, d_x, None, None
    d2_x = np.where(single, 0.0, v_phi * (a_m - a_1) / (v1 * v1))
    Ma = np.zeros((P, n_cells))
    Mb = np.zeros((P, n_cells))
    one = np.nonzero(single)[0]
    Ma[one, cm[one]] = t_m[one] * ez[one]
    many = np.nonzero(~single)[0]
    if many.size:
        inv = 1.0 / v1[many]
        Ma[many, cm[many]] = batch.phi[many] * inv
        Mb[many, cm[many]] = inv
        scale = v_phi[many] * inv * inv
        Ma[many, c1[many]] -= scale * batch.x0[many]
        Mb[many, c1[many]] -= scale
    d2_theta_x = Ma @ Ba + Mb @ Bb
    d2_theta_x += np.where(single, 0.0, a_m / v1)[:, None] * d_theta
    return d_theta, d_x, d2_x, d2_theta_x


def flow_derivatives(basis: CpaBasis, theta, record, second_order: bool = True) -> FlowDerivatives:
    """All derivative families for every trajectory in ``record``.

    ``theta`` is a vector for records from :func:`integrate` /
    :func:`integrate_grid`, or an ``(S, d)`` array for batch records.
    """
    scalar = isinstance(record, TraversalRecord)
    batch = _as_batch(theta, record)
    d_theta, d_x, d2_x, d2_theta_x = _derive(basis, batch, second_order)
    sign = batch.sign
    theta = np.asarray(theta)
    S, n = batch.shape
    lead = (S, n) if theta.ndim == 2 else ((n,) if not scalar else ())
    d = basis.d

    def shape(a, trailing=()):
        return None if a is None else a.reshape(lead + trailing)

    return FlowDerivatives(
        phi=shape(batch.phi),
        d_theta=shape(sign * d_theta, (d,)),
        d_x=shape(d_x),
        d2_x=shape(d2_x),
        d2_theta_x=None if d2_theta_x is None else shape(sign * d2_theta_x, (d,)),
    )


def _scalarize(a):
    return float(a) if np.ndim(a) == 0 else a


def grad_theta(basis: CpaBasis, theta, record) -> np.ndarray:
    """``d phi / d theta``; shape ``(d,)`` for a single record."""
    return flow_derivatives(basis, theta, record, second_order=False).d_theta


def grad_space(basis: CpaBasis, theta, record):
    """``d phi / d x``, strictly positive."""
    return _scalarize(flow_derivatives(basis, theta, record, second_order=False).d_x)


def grad_space2(basis: CpaBasis, theta, record):
    """``d^2 phi / d x^2``; exactly zero when the trajectory stays in one cell."""
    return _scalarize(flow_derivatives(basis, theta, record).d2_x)


def grad_space_theta(basis: CpaBasis, theta, record) -> np.ndarray:
    """Mixed derivative ``d^2 phi / d theta d x``."""
    return flow_derivatives(basis, theta, record).d2_theta_x
