"""Tessellations, continuity constraints and null-space bases for CPA fields.

A continuous piecewise-affine (CPA) velocity field on a uniform partition of
an interval is stored as one ``(slope, intercept)`` pair per cell.  The
coefficient vector ``vec(A) = [a_0, b_0, a_1, b_1, ...]`` is continuous iff
``L @ vec(A) == 0``; a basis ``B`` of the null space of ``L`` turns the
constrained problem into an unconstrained one, ``vec(A) = B @ theta``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatch,
    InvalidCellCount,
    InvalidDomain,
    NonPositiveDefinite,
    OutOfDomain,
    RankDeficiency,
    UnsupportedCombination,
)

__all__ = [
    "BasisKind",
    "Tessellation",
    "CpaBasis",
    "AffineCoeffs",
    "PriorConfig",
    "BasisMetrics",
    "make_tessellation",
    "membership",
    "constraint_matrix",
    "null_space",
    "make_basis",
    "theta_to_affine",
    "basis_metrics",
    "prior_covariance",
    "sample_prior",
]

SPARSITY_CUTOFF = 1e-12


class BasisKind(str, enum.Enum):
    SVD = "svd"
    QR = "qr"
    RREF = "rref"
    SPARSE = "sparse"

    @classmethod
    def parse(cls, value) -> "BasisKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise UnsupportedCombination(
                f"unknown basis kind {value!r}; expected one of {names}"
            ) from None


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Tessellation:
    """Uniform partition of ``[x_min, x_max]`` into ``n_cells`` closed cells."""

    x_min: float
    x_max: float
    n_cells: int
    boundaries: np.ndarray = field(repr=False)

    @property
    def width(self) -> float:
        return (self.x_max - self.x_min) / self.n_cells

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.boundaries[:-1] + self.boundaries[1:])

    @property
    def shared_vertices(self) -> np.ndarray:
        return self.boundaries[1:-1]

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x >= self.x_min) & (x <= self.x_max)


def make_tessellation(x_min: float, x_max: float, n_cells: int) -> Tessellation:
    """Uniform tessellation of ``[x_min, x_max]``.

    Examples
    --------
    >>> make_tessellation(0, 1, 5).boundaries
    array([0. , 0.2, 0.4, 0.6, 0.8, 1. ])
    """
    x_min = float(x_min)
    x_max = float(x_max)
    if not (np.isfinite(x_min) and np.isfinite(x_max)) or x_min >= x_max:
        raise InvalidDomain(f"need finite x_min < x_max, got [{x_min}, {x_max}]")
    if int(n_cells) != n_cells or n_cells < 1:
        raise InvalidCellCount(f"n_cells must be a positive integer, got {n_cells}")
    n_cells = int(n_cells)
    bounds = np.linspace(x_min, x_max, n_cells + 1)
    bounds[0], bounds[-1] = x_min, x_max
    return Tessellation(x_min, x_max, n_cells, _frozen(bounds))


def _cell_index(tess: Tessellation, x: np.ndarray) -> np.ndarray:
    # min rule: a shared vertex belongs to the lower-indexed cell
    c = np.searchsorted(tess.boundaries, x, side="left") - 1
    return np.clip(c, 0, tess.n_cells - 1)


def membership(tess: Tessellation, x):
    """0-based index of the cell containing ``x`` (scalar or array).

    Shared vertices belong to the lower-indexed cell.
    """
    xa = np.asarray(x, dtype=float)
    if not np.all(tess.contains(xa)):
        raise OutOfDomain(f"point(s) outside [{tess.x_min}, {tess.x_max}]")
    c = _cell_index(tess, xa)
    return int(c) if c.ndim == 0 else c


def constraint_matrix(tess: Tessellation, zero_boundary: bool) -> np.ndarray:
    """Continuity constraints ``L`` with one row per shared vertex.

    Each row encodes ``a_i x_j + b_i - a_{i+1} x_j - b_{i+1} = 0``.  With
    ``zero_boundary`` two extra rows force the velocity to vanish at both
    domain ends.
    """
    n = tess.n_cells
    rows = []
    for j, xv in enumerate(tess.shared_vertices, start=1):
        r = np.zeros(2 * n)
        r[2 * (j - 1)] = xv
        r[2 * (j - 1) + 1] = 1.0
        r[2 * j] = -xv
        r[2 * j + 1] = -1.0
        rows.append(r)
    if zero_boundary:
        r = np.zeros(2 * n)
        r[0], r[1] = tess.x_min, 1.0
        rows.append(r)
        r = np.zeros(2 * n)
        r[-2], r[-1] = tess.x_max, 1.0
        rows.append(r)
    return np.array(rows, dtype=float).reshape(-1, 2 * n)


def _rank_tol(s_max: float, shape) -> float:
    return np.finfo(float).eps * max(shape) * s_max


def _null_space_svd(L: np.ndarray) -> np.ndarray:
    m, n = L.shape
    if m == 0:
        return np.eye(n)
    _, s, vt = np.linalg.svd(L, full_matrices=True)
    rank = int(np.sum(s > _rank_tol(s[0], L.shape)))
    return vt[rank:].T.copy()


def _null_space_qr(L: np.ndarray) -> np.ndarray:
    m, n = L.shape
    if m == 0:
        return np.eye(n)
    # the trailing columns of Q in L^T P = Q R span the orthogonal complement
    # of the row space of L
    q, r, _ = scipy.linalg.qr(L.T, pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > _rank_tol(diag[0], L.shape)))
    return q[:, rank:].copy()


def _infer_zero_boundary_tessellation(L: np.ndarray) -> Tessellation:
    """Recover the uniform tessellation a zero-boundary ``L`` was built from."""
    m, cols = L.shape
    if cols % 2 or m != cols // 2 + 1 or cols < 4:
        raise UnsupportedCombination(
            "closed-form bases need a uniform zero-boundary constraint matrix"
        )
    n = cols // 2
    x_min, x_max = L[m - 2, 0], L[m - 1, cols - 2]
    try:
        tess = make_tessellation(x_min, x_max, n)
    except InvalidDomain:
        raise UnsupportedCombination("constraint matrix has no valid domain") from None
    expected = constraint_matrix(tess, zero_boundary=True)
    scale = max(1.0, float(np.abs(expected).max()))
    if not np.allclose(L, expected, rtol=0.0, atol=1e-12 * scale):
        raise UnsupportedCombination(
            "closed-form bases need a uniform zero-boundary constraint matrix"
        )
    return tess


def _null_space_rref(tess: Tessellation) -> np.ndarray:
    n, x0, s = tess.n_cells, tess.x_min, tess.width
    verts = x0 + s * np.arange(1, n)
    if np.any(np.abs(verts) <= 1e-12 * max(1.0, abs(x0), abs(tess.x_max))):
        # the pivot for the cell right of a vertex at the origin vanishes
        raise RankDeficiency("reduced-echelon basis is singular when a shared vertex is 0")
    B = np.zeros((2 * n, n - 1))
    for k in range(1, n):
        col = B[:, k - 1]
        col[0] = x0 + s
        col[1] = -x0 * (x0 + s)
        col[2 : 2 * k - 1 : 2] = s
        col[2 * k] = -(x0 + k * s)
        col[2 * k + 1] = (x0 + k * s) * (x0 + (k + 1) * s)
    return B


def _null_space_sparse(tess: Tessellation) -> np.ndarray:
    # column k is a unit-slope hat peaking at shared vertex k
    n, xs = tess.n_cells, tess.boundaries
    B = np.zeros((2 * n, n - 1))
    for k in range(1, n):
        B[2 * (k - 1), k - 1] = 1.0
        B[2 * (k - 1) + 1, k - 1] = -xs[k - 1]
        B[2 * k, k - 1] = -1.0
        B[2 * k + 1, k - 1] = xs[k + 1]
    return B


def null_space(L: np.ndarray, method, normalize: bool = True) -> np.ndarray:
    """Basis of the null space of ``L``.

    ``SVD`` and ``QR`` return orthonormal columns.  ``RREF`` and ``SPARSE``
    use closed-form constructions and require ``L`` to be the zero-boundary
    constraint matrix of a uniform tessellation.  ``normalize`` only affects
    ``RREF``, whose columns are then scaled to unit max-abs entry.
    """
    method = BasisKind.parse(method)
    L = np.asarray(L, dtype=float)
    if L.ndim != 2:
        raise DimensionMismatch("L must be a 2-D matrix")
    expected_d = L.shape[1] - L.shape[0]
    if method is BasisKind.SVD:
        B = _null_space_svd(L)
    elif method is BasisKind.QR:
        B = _null_space_qr(L)
    else:
        tess = _infer_zero_boundary_tessellation(L)
        if method is BasisKind.RREF:
            B = _null_space_rref(tess)
            if normalize:
                B = B / np.abs(B).max(axis=0)
        else:
            B = _null_space_sparse(tess)
    if B.shape[1] != expected_d:
        raise RankDeficiency(
            f"detected null-space dimension {B.shape[1]}, expected {expected_d}"
        )
    return B


@dataclass(frozen=True)
class CpaBasis:
    """Null-space basis ``B`` (``2 N_P x d``) of the continuity constraints."""

    B: np.ndarray = field(repr=False)
    kind: BasisKind
    zero_boundary: bool
    tess: Tessellation

    @property
    def d(self) -> int:
        return self.B.shape[1]

    @property
    def n_cells(self) -> int:
        return self.tess.n_cells

    @property
    def slope_rows(self) -> np.ndarray:
        """``(N_P, d)`` map from theta to per-cell slopes."""
        return self.B[0::2]

    @property
    def intercept_rows(self) -> np.ndarray:
        """``(N_P, d)`` map from theta to per-cell intercepts."""
        return self.B[1::2]


def make_basis(
    tess: Tessellation,
    kind="svd",
    zero_boundary: bool = True,
    normalize: bool = True,
) -> CpaBasis:
    """Build a :class:`CpaBasis` of the requested kind on ``tess``."""
    kind = BasisKind.parse(kind)
    if kind in (BasisKind.RREF, BasisKind.SPARSE) and not zero_boundary:
        raise UnsupportedCombination(f"{kind.value} basis requires zero_boundary=True")
    if zero_boundary and tess.n_cells < 2:
        raise InvalidCellCount("a zero-boundary field needs at least 2 cells")
    L = constraint_matrix(tess, zero_boundary)
    B = null_space(L, kind, normalize=normalize)
    return CpaBasis(_frozen(B), kind, bool(zero_boundary), tess)


@dataclass(frozen=True)
class AffineCoeffs:
    """Per-cell ``(a_c, b_c)`` pairs, stored as an ``(N_P, 2)`` array."""

    rows: np.ndarray

    @property
    def slopes(self) -> np.ndarray:
        return self.rows[:, 0]

    @property
    def intercepts(self) -> np.ndarray:
        return self.rows[:, 1]

    def continuity_residual(self, tess: Tessellation) -> np.ndarray:
        xv = tess.shared_vertices
        left = self.rows[:-1, 0] * xv + self.rows[:-1, 1]
        right = self.rows[1:, 0] * xv + self.rows[1:, 1]
        return np.abs(left - right)


def _check_theta(basis: CpaBasis, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1:] != (basis.d,):
        raise DimensionMismatch(
            f"theta has length {theta.shape[-1] if theta.ndim else 0}, basis has d={basis.d}"
        )
    return theta


def theta_to_affine(basis: CpaBasis, theta) -> AffineCoeffs:
    """Map ``theta`` to per-cell coefficients via ``vec(A) = B @ theta``."""
    theta = _check_theta(basis, theta)
    if theta.ndim != 1:
        raise DimensionMismatch("theta must be a vector")
    return AffineCoeffs((basis.B @ theta).reshape(basis.n_cells, 2))


def affine_batch(basis: CpaBasis, thetas) -> np.ndarray:
    """Coefficients for a batch of parameter vectors, shape ``(S, N_P, 2)``."""
    thetas = np.atleast_2d(_check_theta(basis, thetas))
    return (thetas @ basis.B.T).reshape(thetas.shape[0], basis.n_cells, 2)


@dataclass(frozen=True)
class BasisMetrics:
    frobenius_norm: float
    inverse_norm: float
    condition_number: float
    orthogonality_defect: float
    sparsity: float


def basis_metrics(basis) -> BasisMetrics:
    """Norm, pseudo-inverse norm, spectral condition number, orthogonality
    defect and sparsity of a basis matrix (or :class:`CpaBasis`)."""
    B = basis.B if isinstance(basis, CpaBasis) else np.asarray(basis, dtype=float)
    pinv = np.linalg.pinv(B)
    d = B.shape[1]
    return BasisMetrics(
        frobenius_norm=float(np.linalg.norm(B)),
        inverse_norm=float(np.linalg.norm(pinv)),
        condition_number=float(np.linalg.cond(B)),
        orthogonality_defect=float(np.linalg.norm(B.T @ B - np.eye(d))),
        sparsity=float(np.mean(np.abs(B) <= SPARSITY_CUTOFF)),
    )


@dataclass(frozen=True)
class PriorConfig:
    """Squared-exponential smoothness prior over per-cell coefficients."""

    lambda_sigma: float = 1e-2
    lambda_s: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (self.lambda_sigma > 0 and self.lambda_s > 0):
            raise NonPositiveDefinite("prior scales must be strictly positive")
        if int(self.seed) != self.seed or self.seed < 0:
            raise DimensionMismatch("seed must be a non-negative integer")


def _cell_kernel(tess: Tessellation, cfg: PriorConfig) -> np.ndarray:
    c = tess.centers
    dist2 = (c[:, None] - c[None, :]) ** 2
    return cfg.lambda_sigma * np.exp(-dist2 / (2.0 * cfg.lambda_s**2))


def prior_covariance(basis: CpaBasis, cfg: PriorConfig) -> np.ndarray:
    """``Sigma_CPA = B^T Sigma_PA B`` with independent slope/intercept blocks."""
    K = _cell_kernel(basis.tess, cfg)
    Ba, Bb = basis.slope_rows, basis.intercept_rows
    return Ba.T @ K @ Ba + Bb.T @ K @ Bb


def _kernel_cholesky(K: np.ndarray, scale: float) -> np.ndarray:
    jitter = 1e-10 * scale
    if not np.all(np.isfinite(K)):
        raise NonPositiveDefinite("kernel matrix has non-finite entries")
    try:
        return np.linalg.cholesky(K + jitter * np.eye(K.shape[0]))
    except np.linalg.LinAlgError:
        raise NonPositiveDefinite(
            "kernel matrix is not positive definite; length-scale too extreme"
        ) from None


def sample_prior(basis: CpaBasis, cfg: PriorConfig, count: int) -> np.ndarray:
    """Draw ``count`` parameter vectors, returned as a ``(count, d)`` array.

    Per-cell coefficients are drawn from the squared-exponential prior and
    projected with ``theta = B^T vec(A)``.  Draws depend only on ``cfg.seed``.
    """
    if int(count) != count or count < 1:
        raise DimensionMismatch("count must be a positive integer")
    K = _cell_kernel(basis.tess, cfg)
    chol = _kernel_cholesky(K, cfg.lambda_sigma)
    rng = np.random.default_rng(cfg.seed)
    z = rng.standard_normal((int(count), basis.n_cells, 2))
    A = np.einsum("ij,sjk->sik", chol, z)
    return A.reshape(int(count), -1) @ basis.B
