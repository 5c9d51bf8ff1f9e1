"""Generic Runge-Kutta integrators for CPA fields.

These solvers only evaluate the velocity field and know nothing about the
closed-form cell solution, which makes them an independent reference for
:mod:`cpawarp.flow` and the baseline for speed comparisons.
"""

from __future__ import annotations

import numpy as np

from .basis import CpaBasis, _cell_index, affine_batch
from .errors import DimensionMismatch, IterationOverflow

__all__ = ["velocity_batch", "rk4_fixed", "rk4_adaptive"]


def velocity_batch(basis: CpaBasis, A: np.ndarray, f: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Velocity of field ``f[p]`` at ``x[p]``; edge cells extend past the domain."""
    c = _cell_index(basis.tess, x)
    return A[f, c, 0] * x + A[f, c, 1]


def _setup(basis, thetas, xs):
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[1] != basis.d:
        raise DimensionMismatch(f"thetas must have shape (S, {basis.d})")
    S = thetas.shape[0]
    xs = np.asarray(xs, dtype=float)
    if xs.ndim <= 1:
        xs = np.broadcast_to(np.atleast_1d(xs), (S, np.atleast_1d(xs).size))
    A = affine_batch(basis, thetas)
    n = xs.shape[1]
    f = np.repeat(np.arange(S), n)
    return A, f, np.ascontiguousarray(xs, dtype=float).reshape(-1).copy(), (S, n)


def _rk4_step(basis, A, f, x, h):
    k1 = velocity_batch(basis, A, f, x)
    k2 = velocity_batch(basis, A, f, x + 0.5 * h * k1)
    k3 = velocity_batch(basis, A, f, x + 0.5 * h * k2)
    k4 = velocity_batch(basis, A, f, x + h * k3)
    return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_fixed(basis: CpaBasis, thetas, xs, time: float = 1.0, n_steps: int = 100) -> np.ndarray:
    """Classical RK4 with ``n_steps`` equal steps; returns ``(S, n)``."""
    A, f, x, shape = _setup(basis, thetas, xs)
    h = float(time) / int(n_steps)
    for _ in range(int(n_steps)):
        x = _rk4_step(basis, A, f, x, h)
    return x.reshape(shape)


def rk4_adaptive(basis: CpaBasis, thetas, xs, time: float = 1.0, tol: float = 1e-12,
                 h0: float = 1e-2, max_steps: int = 200_000) -> np.ndarray:
    """RK4 with per-point step-doubling error control.

    Each step is taken once with ``h`` and twice with ``h / 2``; the
    difference estimates the local error, and accepted steps use the
    Richardson-extrapolated value.  Returns ``(S, n)``.
    """
    A, f, x, shape = _setup(basis, thetas, xs)
    T = float(time)
    t = np.zeros_like(x)
    h = np.full_like(x, min(h0, T) if T > 0 else 0.0)
    active = np.nonzero(t < T)[0] if T > 0 else np.array([], dtype=np.int64)
    steps = 0
    while active.size:
        steps += 1
        if steps > max_steps:
            raise IterationOverflow("adaptive RK4 did not finish")
        fa = f[active]
        xa = x[active]
        ha = np.minimum(h[active], T - t[active])
        full = _rk4_step(basis, A, fa, xa, ha)
        half = _rk4_step(basis, A, fa, xa, 0.5 * ha)
        half = _rk4_step(basis, A, fa, half, 0.5 * ha)
        err = np.abs(half - full) / 15.0
        ok = err <= tol
        acc = active[ok]
        x[acc] = half[ok] + (half[ok] - full[ok]) / 15.0
        t[acc] = np.where(T - (t[acc] + ha[ok]) <= 1e-15 * T, T, t[acc] + ha[ok])
        with np.errstate(divide="ignore"):
            factor = np.where(err > 0, 0.9 * (tol / err) ** 0.2, 4.0)
        h[active] = ha * np.clip(factor, 0.1, 4.0)
        active = active[t[active] < T]
    return x.reshape(shape)
