"""Differentiable linear interpolation on uniform grids and
scaling-and-squaring composition of sampled warps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import CpaBasis
from .errors import OutOfRange, RangeEscape, ShapeMismatch
from .flow import FlowConfig, integrate_grid

__all__ = [
    "SampledWarp",
    "InterpDerivs",
    "interp",
    "interp_derivs",
    "interp_array",
    "self_compose",
    "integrate_ss",
    "SquaringReport",
]


@dataclass(frozen=True)
class SampledWarp:
    """A warp sampled at knots ``grid_x`` (uniform, increasing)."""

    grid_x: np.ndarray
    grid_y: np.ndarray

    def __post_init__(self):
        gx = np.asarray(self.grid_x, dtype=float)
        gy = np.asarray(self.grid_y, dtype=float)
        if gx.ndim != 1 or gx.shape != gy.shape or gx.size < 2:
            raise ShapeMismatch("grid_x and grid_y must be 1-D of equal length >= 2")
        if np.any(np.diff(gx) <= 0):
            raise ShapeMismatch("grid_x must be strictly increasing")
        object.__setattr__(self, "grid_x", gx)
        object.__setattr__(self, "grid_y", gy)

    @classmethod
    def identity(cls, lo: float, hi: float, n: int) -> "SampledWarp":
        g = np.linspace(lo, hi, n)
        return cls(g, g.copy())


@dataclass(frozen=True)
class InterpDerivs:
    """Sensitivities of one interpolated value.

    ``d_dy`` and ``d_dx_knots`` map knot index to weight.
    """

    value: float
    d_dy: dict = field(default_factory=dict)
    d_dquery: float = 0.0
    d_dx_knots: dict = field(default_factory=dict)


def _locate(gx: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Left knot index of the interval used for ``q``; the last knot uses
    the final interval."""
    j = np.searchsorted(gx, q, side="right") - 1
    return np.clip(j, 0, gx.size - 2)


def _check_range(gx, q):
    if np.any(q < gx[0]) or np.any(q > gx[-1]) or np.any(~np.isfinite(q)):
        raise OutOfRange(f"query outside [{gx[0]}, {gx[-1]}]")


def interp_array(gx: np.ndarray, gy: np.ndarray, q, clamp: bool = False):
    """Vectorised hat-basis interpolation.

    ``gy`` may carry trailing channel axes, ``(n, ...)``.  Returns
    ``(values, slope, left_index, weight_right)`` where ``slope`` is the local
    derivative with respect to the query (zero where clamping was active).
    """
    q = np.asarray(q, dtype=float)
    if clamp:
        inside = (q >= gx[0]) & (q <= gx[-1])
        q = np.clip(q, gx[0], gx[-1])
    else:
        _check_range(gx, q)
        inside = np.ones(q.shape, dtype=bool)
    j = _locate(gx, q)
    dx = gx[j + 1] - gx[j]
    w = (q - gx[j]) / dx
    y0 = gy[j]
    y1 = gy[j + 1]
    extra = (slice(None),) * q.ndim + (None,) * (gy.ndim - 1)
    vals = y0 + (y1 - y0) * w[extra]
    slope = (y1 - y0) / dx[extra] * inside[extra]
    return vals, slope, j, w


def interp(warp: SampledWarp, query):
    """Piecewise-linear interpolation of ``warp`` at ``query``; exact at knots."""
    vals, _, _, _ = interp_array(warp.grid_x, warp.grid_y, query)
    return float(vals) if np.ndim(vals) == 0 else vals


def interp_derivs(warp: SampledWarp, query: float) -> InterpDerivs:
    """Value and derivatives of the interpolant at one query point."""
    gx, gy = warp.grid_x, warp.grid_y
    q = float(query)
    _check_range(gx, np.asarray(q))
    j = int(_locate(gx, np.asarray(q)))
    dx = gx[j + 1] - gx[j]
    w = (q - gx[j]) / dx
    dy = gy[j + 1] - gy[j]
    return InterpDerivs(
        value=float(gy[j] + dy * w),
        d_dy={j: 1.0 - w, j + 1: w},
        d_dquery=float(dy / dx),
        d_dx_knots={j: float(-dy * (gx[j + 1] - q) / dx**2),
                    j + 1: float(-dy * (q - gx[j]) / dx**2)},
    )


def self_compose(warp: SampledWarp, clamp: bool = False) -> SampledWarp:
    """Compose a warp with itself: ``y_i <- interp(warp, y_i)``.

    Knot values outside the grid raise :class:`RangeEscape` unless ``clamp``
    is set, in which case they are clipped to the grid range first, so the
    result stays inside the grid range.
    """
    gx, gy = warp.grid_x, warp.grid_y
    if clamp:
        gy = np.clip(gy, gx[0], gx[-1])
    elif np.any(gy < gx[0]) or np.any(gy > gx[-1]):
        raise RangeEscape("warp values leave the interpolation grid")
    vals, _, _, _ = interp_array(gx, gy, gy)
    return SampledWarp(gx, vals)


@dataclass(frozen=True)
class SquaringReport:
    values: np.ndarray
    clamped: int


def integrate_ss(basis: CpaBasis, theta, xs, n_squarings: int, cfg: FlowConfig | None = None,
                 report: bool = False):
    """Scaling and squaring on the grid ``xs``.

    The closed-form flow is evaluated for time ``t / 2^N`` and the sampled
    warp is then composed with itself ``N`` times.  Non-zero-boundary fields
    are clamped to the grid; the number of clamped knots is available with
    ``report=True``.
    """
    if int(n_squarings) != n_squarings or not 0 <= n_squarings <= 12:
        raise ShapeMismatch("n_squarings must be an integer in [0, 12]")
    cfg = cfg or FlowConfig()
    xs = np.asarray(xs, dtype=float)
    n = int(n_squarings)
    short = FlowConfig(time=cfg.time / 2**n, epsilon_slope=cfg.epsilon_slope,
                       max_iter=cfg.max_iter, exp=cfg.exp)
    ys, _ = integrate_grid(basis, theta, xs, short)
    warp = SampledWarp(xs, ys)
    clamped = 0
    clamp = not basis.zero_boundary
    for _ in range(n):
        if clamp:
            clamped += int(np.count_nonzero((warp.grid_y < xs[0]) | (warp.grid_y > xs[-1])))
        warp = self_compose(warp, clamp=clamp)
    if report:
        return SquaringReport(warp.grid_y, clamped)
    return warp.grid_y
