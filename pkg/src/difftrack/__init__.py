"""Differentiable batched deterministic streamline tractography.

Propagates streamlines through a fiber-orientation-distribution field
stored as spherical-harmonic coefficients and, on request, records the
whole computation on a scalar tape so exact gradients of streamline
coordinates with respect to the input coefficients come out of a single
reverse sweep.
"""

from .autodiff import (
    CONSTANT,
    DiffValue,
    GradientResult,
    Tape,
    backward,
    dot,
    stop_gradient,
)
from .errors import (
    DifftrackError,
    DimensionMismatchError,
    DomainError,
    FormatError,
    InvalidDirectionError,
    InvalidInputError,
    InvalidParameterError,
    NoGradientError,
    TapePoisonedError,
)
from .gradcheck import GradcheckReport, run_gradcheck
from .metrics import (
    DistanceReport,
    directed_hausdorff,
    hausdorff,
    percentile_report,
)
from .nifti import load_mask, load_volume, save_mask, save_volume
from .peaks import (
    NewtonConstants,
    PeakBatch,
    find_peaks_batch,
    find_peaks_sequential_reference,
    newton_step,
)
from .propagate import (
    SeedBatch,
    StreamlineBatch,
    TerminationReason,
    TrackingParams,
    accept_seeds,
    crop_to_valid,
    propagate_batch,
    propagate_bidirectional,
    sample_directions,
    sample_seeds,
)
from .shbasis import (
    BasisDerivatives,
    ShCoefficients,
    SphericalAngles,
    amplitude,
    cartesian_to_angles,
    eval_basis,
    eval_basis_derivatives,
    num_coefficients,
)
from .tables import (
    load_seed_table,
    save_distance_table,
    save_gradcheck_table,
    save_seed_table,
)
from .tracks import load_tracks, save_tracks
from .volume import (
    BinaryMask,
    FodVolume,
    InterpolationStencil,
    in_bounds,
    interpolate_coeffs,
    mask_contains,
    trilinear_stencil,
    voxel_to_world,
    world_to_voxel,
)

__version__ = "0.1.0"
