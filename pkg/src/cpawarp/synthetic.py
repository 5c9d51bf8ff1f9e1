"""Synthetic series with known warps, for tests, fixtures and demos."""

from __future__ import annotations

import numpy as np

from .basis import PriorConfig, make_basis, make_tessellation, sample_prior
from .flow import FlowConfig, integrate_batch

__all__ = ["PROTOTYPES", "prototype", "warped_copies", "drifting_stream"]


def _bump(t, center, width):
    return np.exp(-0.5 * ((t - center) / width) ** 2)


# well-separated shape families on [0, 1]
PROTOTYPES = {
    "single_bump": lambda t: _bump(t, 0.5, 0.06),
    "two_bumps": lambda t: _bump(t, 0.3, 0.05) + 0.8 * _bump(t, 0.7, 0.05),
    "dip_peak": lambda t: -_bump(t, 0.3, 0.06) + _bump(t, 0.65, 0.06),
    "ramp_bump": lambda t: 0.8 * t + 0.6 * _bump(t, 0.45, 0.04) - 0.4,
}


def prototype(name: str, t) -> np.ndarray:
    return PROTOTYPES[name](np.asarray(t, dtype=float))


def _warp_grids(count, length, n_cells, lambda_sigma, lambda_s, rng_seed):
    basis = make_basis(make_tessellation(0.0, 1.0, n_cells), "svd", zero_boundary=True)
    thetas = sample_prior(basis, PriorConfig(lambda_sigma, lambda_s, rng_seed), count)
    t = np.linspace(0.0, 1.0, length)
    phis, _ = integrate_batch(basis, thetas, t, FlowConfig())
    return t, phis, thetas


def warped_copies(name_or_fn, count: int = 20, length: int = 100, n_cells: int = 16,
                  lambda_sigma: float = 1e-2, lambda_s: float = 0.1, noise: float = 0.0,
                  seed: int = 0):
    """Exact warped copies ``f(phi_i(t))`` of a prototype.

    Returns ``(copies (count, length), thetas (count, d), prototype (length,))``.
    """
    fn = PROTOTYPES[name_or_fn] if isinstance(name_or_fn, str) else name_or_fn
    t, phis, thetas = _warp_grids(count, length, n_cells, lambda_sigma, lambda_s, seed)
    copies = fn(phis)
    if noise:
        copies = copies + noise * np.random.default_rng(seed + 1).standard_normal(copies.shape)
    return copies, thetas, fn(t)


def drifting_stream(n_series: int = 500, length: int = 64, n_cells: int = 16,
                    lambda_sigma: float = 5e-2, lambda_s: float = 0.1, noise: float = 0.02,
                    drift: float = 0.2, seed: int = 0):
    """Stream of randomly interleaved warped series from four shape families.

    Prototype amplitudes drift linearly from 1 to ``1 + drift`` over the
    stream.  Returns ``(series (n_series, length), labels (n_series,))``.
    """
    rng = np.random.default_rng(seed)
    names = list(PROTOTYPES)
    labels = rng.integers(len(names), size=n_series)
    _, phis, _ = _warp_grids(n_series, length, n_cells, lambda_sigma, lambda_s, seed + 1)
    scale = 1.0 + drift * np.arange(n_series) / max(n_series - 1, 1)
    out = np.empty((n_series, length))
    for i in range(n_series):
        out[i] = scale[i] * PROTOTYPES[names[labels[i]]](phis[i])
    out += noise * rng.standard_normal(out.shape)
    return out, labels
