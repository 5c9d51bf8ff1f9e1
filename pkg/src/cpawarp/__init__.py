"""Continuous piecewise-affine (CPA) warps of the line.

Bases for CPA velocity fields, closed-form integration with exact
derivatives, grid warps, a monotone bijector, elastic alignment, streaming
clustering and fast exponential kernels.
"""

from .align import (
    AlignConfig,
    AlignResult,
    elastic_distance,
    elastic_mean,
    joint_align,
    joint_loss,
    set_variance,
    symmetric_elastic_distance,
    variance_reduction,
    warp_series,
)
from .basis import (
    BasisKind,
    BasisMetrics,
    CpaBasis,
    PriorConfig,
    Tessellation,
    basis_metrics,
    constraint_matrix,
    make_basis,
    make_tessellation,
    membership,
    null_space,
    prior_covariance,
    sample_prior,
    theta_to_affine,
)
from .bijector import MonotoneBijector, make_bijector
from .cluster import (
    ClusterModel,
    ClusterState,
    adjusted_rand,
    assign,
    incremental_mean,
    incremental_scaled_variance,
    run_stream,
    warmup,
)
from .errors import CpaWarpError, IoError, NumericalError, UsageError
from .flow import (
    FlowConfig,
    TraversalBatch,
    TraversalRecord,
    hitting_time,
    integrate,
    integrate_batch,
    integrate_grid,
    integrate_inverse,
)
from .grad import FlowDerivatives, flow_derivatives, grad_space, grad_space2, grad_space_theta, grad_theta
from .warp_grid import SampledWarp, integrate_ss, interp, interp_derivs, self_compose

__version__ = "0.1.0"
