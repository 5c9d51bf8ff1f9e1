"""Monotone bijection of the real line built from a CPA flow.

On ``[-B, B]`` the map is the CPA diffeomorphism (computed on the unit
interval after an affine rescaling); outside it is the identity.  Because the
field vanishes at both ends of the interval, the map is continuous at
``+-B``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import CpaBasis
from .errors import BijectorBasisError, DimensionMismatch
from .flow import FlowConfig, integrate_grid
from .grad import flow_derivatives

__all__ = ["MonotoneBijector", "ParamGrads", "make_bijector"]


@dataclass(frozen=True)
class ParamGrads:
    d_forward_dtheta: np.ndarray
    d_logdet_dtheta: np.ndarray


@dataclass(frozen=True)
class MonotoneBijector:
    """CPA warp on ``[-bound, bound]`` with identity tails.

    ``basis`` must be a zero-boundary basis on ``[0, 1]``.
    """

    basis: CpaBasis
    theta: np.ndarray = field(repr=False)
    bound: float = 1.0
    cfg: FlowConfig = field(default_factory=FlowConfig)

    def __post_init__(self):
        if not self.basis.zero_boundary:
            raise BijectorBasisError("bijector needs a zero-boundary basis")
        tess = self.basis.tess
        if tess.x_min != 0.0 or tess.x_max != 1.0:
            raise BijectorBasisError("bijector basis must live on the unit interval")
        if not self.bound > 0:
            raise BijectorBasisError("bound must be positive")
        theta = np.array(self.theta, dtype=float)
        if theta.shape != (self.basis.d,):
            raise DimensionMismatch(f"theta must have length {self.basis.d}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "bound", float(self.bound))

    # rescaling between [-B, B] and [0, 1]
    def _to_unit(self, z):
        return (z + self.bound) / (2.0 * self.bound)

    def _from_unit(self, u):
        return 2.0 * self.bound * u - self.bound

    def _split(self, z):
        z = np.asarray(z, dtype=float)
        inside = np.abs(z) <= self.bound
        return z, inside

    def _interior_flow(self, z, theta):
        u = np.clip(self._to_unit(z), 0.0, 1.0)
        phi, rec = integrate_grid(self.basis, theta, u.reshape(-1), self.cfg)
        return phi, rec

    def forward(self, z):
        z, inside = self._split(z)
        out = z.astype(float).copy()
        if np.any(inside):
            phi, _ = self._interior_flow(z[inside], self.theta)
            out[inside] = self._from_unit(phi)
        return float(out) if out.ndim == 0 else out

    def inverse(self, x):
        x, inside = self._split(x)
        out = x.astype(float).copy()
        if np.any(inside):
            phi, _ = self._interior_flow(x[inside], -self.theta)
            out[inside] = self._from_unit(phi)
        return float(out) if out.ndim == 0 else out

    def log_abs_det(self, z):
        z, inside = self._split(z)
        out = np.zeros(z.shape)
        if np.any(inside):
            phi, rec = self._interior_flow(z[inside], self.theta)
            d = flow_derivatives(self.basis, self.theta, rec, second_order=False)
            out[inside] = np.log(d.d_x)
        return float(out) if out.ndim == 0 else out

    def param_grads(self, z) -> ParamGrads:
        """Derivatives of ``forward(z)`` and ``log_abs_det(z)`` w.r.t. theta.

        Shapes are ``z.shape + (d,)``; tails give zeros.
        """
        z, inside = self._split(z)
        d = self.basis.d
        fwd = np.zeros(z.shape + (d,))
        logdet = np.zeros(z.shape + (d,))
        if np.any(inside):
            _, rec = self._interior_flow(z[inside], self.theta)
            der = flow_derivatives(self.basis, self.theta, rec)
            fwd[inside] = 2.0 * self.bound * der.d_theta
            logdet[inside] = der.d2_theta_x / der.d_x[:, None]
        return ParamGrads(fwd, logdet)


def make_bijector(basis: CpaBasis, theta, bound: float = 1.0,
                  cfg: FlowConfig | None = None) -> MonotoneBijector:
    return MonotoneBijector(basis, theta, bound, cfg or FlowConfig())
