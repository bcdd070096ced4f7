"""Newton-Raphson ascent to local FOD maxima on the sphere.

The batched variant runs a fixed number of iterations (default 50) with a
per-element update mask: converged elements freeze (their direction keeps
its exact bits) while the rest keep refining.  Update rule per iteration:

* gradient in the orthonormal spherical frame, with the azimuthal component
  metric-corrected by 1/max(sin el, 1e-6);
* unit ascent direction from the corrected gradient (epsilon-regularized);
* step dt = |-(dA/dt) / (d2A/dt2)| clamped to ``max_dir_change``, where
  d2A/dt2 is the second derivative along the straight coordinate-space ray
  through (el, az) in the ascent direction;
* great-circle move u' = cos(dt) u + sin(dt) t, renormalized.

A degenerate second derivative (|d2A/dt2| < 1e-12) falls back to a pure
gradient step at the clamp, or to no step at all when the gradient itself
vanishes (flat fields converge immediately instead of wandering).  The
batched loop never emits NaN; elements that fail to converge simply return
their current direction and let the caller's amplitude threshold decide.

``find_peaks_sequential_reference`` is the early-returning single-direction
transcription (including its NaN non-convergence signalling); it exists as
a test oracle for the batched code path.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import engine as eg
from .errors import DomainError, InvalidDirectionError, InvalidParameterError
from .shbasis import basis_plan, contract, eval_stack
from .volume import in_bounds_batch, interpolate_batch, world_to_voxel_batch

POLE_EPS = 1e-6        # clamp on sin(el) in the metric correction
NORM_EPS = 1e-12       # gradient normalization: g / (|g| + eps)
DEGEN_EPS = 1e-12      # |d2A/dt2| below this counts as degenerate


@dataclass(frozen=True)
class NewtonConstants:
    """Iteration cap and angular thresholds for the ascent."""

    max_iterations: int = 50
    angle_tolerance: float = 1e-4
    max_dir_change: float = 0.2

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InvalidParameterError("max_iterations must be >= 1")
        if not (0.0 < self.angle_tolerance < self.max_dir_change < math.pi / 2):
            raise InvalidParameterError(
                "need 0 < angle_tolerance < max_dir_change < pi/2, got "
                f"{self.angle_tolerance}, {self.max_dir_change}"
            )


@dataclass(frozen=True)
class PeakBatch:
    """Refined directions, their amplitudes, and the final update mask."""

    directions: np.ndarray
    amplitudes: np.ndarray
    update_mask: np.ndarray
    iterations_run: int


def _amplitude_batch(plan, lmax, coeff_cols, ux, uy, uz):
    az = eg.vatan2(uy, ux)
    el = eg.vacos(uz)
    stack = eval_stack(
        plan, eg.vcos(el), eg.vsin(el), eg.vcos(az), eg.vsin(az), lmax, want_derivs=False
    )
    return contract(coeff_cols, stack[0])


def newton_iteration(plan, lmax, coeff_cols, ux, uy, uz, constants):
    """One masked-update-free Newton iteration for a batch of directions.

    Returns (nx, ny, nz, dt, A, decisions): the updated unit directions,
    the step magnitude (radians, before masking), the amplitude at the
    *input* directions, and the per-element discrete decisions taken
    (degenerate-Hessian branch, flat-gradient branch) -- those branches
    are jumps, so gradient checks must hold them fixed.  Works on plain
    arrays and TapeArrays.
    """
    az = eg.vatan2(uy, ux)
    el = eg.vacos(uz)
    sin_el = eg.vsin(el)
    cos_el = eg.vcos(el)
    sin_az = eg.vsin(az)
    cos_az = eg.vcos(az)
    y, yel, yaz, yel2, yaz2, yelaz = eval_stack(
        plan, cos_el, sin_el, cos_az, sin_az, lmax
    )
    amp = contract(coeff_cols, y)
    a_el = contract(coeff_cols, yel)
    a_az = contract(coeff_cols, yaz)
    a_el2 = contract(coeff_cols, yel2)
    a_az2 = contract(coeff_cols, yaz2)
    a_elaz = contract(coeff_cols, yelaz)

    inv_s = 1.0 / eg.vclamp(sin_el, POLE_EPS, None)
    g_el = a_el
    g_az = a_az * inv_s
    g = eg.vsqrt(g_el * g_el + g_az * g_az)
    ghat_el = g_el / (g + NORM_EPS)
    ghat_az = g_az / (g + NORM_EPS)
    # second derivative along the coordinate-space ray (el, az) + t (ghat_el, ghat_az/s)
    hess = (
        ghat_el * (ghat_el * a_el2)
        + 2.0 * (ghat_el * (ghat_az * (a_elaz * inv_s)))
        + ghat_az * (ghat_az * ((a_az2 * inv_s) * inv_s))
    )
    abs_h = eg.vabs(hess)
    degenerate = eg.values(abs_h) < DEGEN_EPS
    flat = degenerate & (eg.values(g) < DEGEN_EPS)
    h_safe = eg.select(degenerate, 1.0, abs_h)
    dt_newton = eg.vclamp(eg.vabs(g / h_safe), 0.0, constants.max_dir_change)
    dt_flat = np.where(flat, 0.0, constants.max_dir_change)
    dt = eg.select(degenerate, dt_flat, dt_newton)

    # unit tangent t = ghat_el e_el + ghat_az e_az
    tx = ghat_el * (cos_el * cos_az) - ghat_az * sin_az
    ty = ghat_el * (cos_el * sin_az) + ghat_az * cos_az
    tz = -(ghat_el * sin_el)
    cdt = eg.vcos(dt)
    sdt = eg.vsin(dt)
    vx = cdt * ux + sdt * tx
    vy = cdt * uy + sdt * ty
    vz = cdt * uz + sdt * tz
    norm = eg.vsqrt(vx * vx + vy * vy + vz * vz)
    return vx / norm, vy / norm, vz / norm, dt, amp, (degenerate, flat)


def run_newton(volume, pos_xyz, dir_xyz, constants, tape=None, coeff_offsets=None):
    """Interpolate once per position, then run the fixed masked loop.

    ``pos_xyz`` / ``dir_xyz`` are triples of (B,) columns in world mm (plain
    or taped).  Returns (directions triple, amplitudes, update_mask,
    decisions) where ``decisions`` is a (B, 3) int array holding, per
    element: the 1-based iteration whose step first fell below the
    tolerance (0 if none), and the counts of degenerate-Hessian and
    flat-gradient branch hits across the fixed iteration loop.
    """
    plan = basis_plan(volume.lmax)
    px, py, pz = world_to_voxel_batch(volume, *pos_xyz)
    coeff_cols = interpolate_batch(volume, px, py, pz, tape, coeff_offsets)
    ux, uy, uz = dir_xyz
    n = len(eg.values(ux))
    active = np.ones(n, dtype=bool)
    decisions = np.zeros((n, 3), dtype=np.int64)
    for it in range(1, constants.max_iterations + 1):
        nx, ny, nz, dt, _, (degenerate, flat) = newton_iteration(
            plan, volume.lmax, coeff_cols, ux, uy, uz, constants
        )
        # the update is applied with the mask from the previous iteration,
        # so the sub-tolerance final rotation is still taken before freezing
        ux = eg.select(active, nx, ux)
        uy = eg.select(active, ny, uy)
        uz = eg.select(active, nz, uz)
        decisions[:, 1] += degenerate
        decisions[:, 2] += flat
        converged_now = active & (eg.values(dt) < constants.angle_tolerance)
        decisions[converged_now, 0] = it
        active = active & ~converged_now
    amps = _amplitude_batch(plan, volume.lmax, coeff_cols, ux, uy, uz)
    return (ux, uy, uz), amps, active, decisions


def _check_directions(directions):
    d = np.asarray(directions, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != 3 or not np.all(np.isfinite(d)):
        raise InvalidDirectionError("directions must be finite with shape (B, 3)")
    norms = np.sqrt((d * d).sum(axis=1))
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise InvalidDirectionError("directions must be unit length within 1e-6")
    return d


def find_peaks_batch(volume, positions, init_directions, constants, tape=None):
    """Refine a batch of directions to local FOD maxima.

    Every position must lie inside the image domain.  The loop body runs
    exactly ``constants.max_iterations`` times for the whole batch; the
    final amplitudes are evaluated at the returned directions.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise InvalidParameterError("positions must have shape (B, 3)")
    dirs = _check_directions(init_directions)
    if len(dirs) != len(pos):
        raise InvalidParameterError("positions and directions disagree in length")
    px, py, pz = world_to_voxel_batch(volume, pos[:, 0], pos[:, 1], pos[:, 2])
    ok = in_bounds_batch(volume, px, py, pz)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise DomainError(
            f"position {pos[bad]} (batch element {bad}) is outside the image domain",
            position=pos[bad],
        )
    if tape is not None:
        pos_cols = tuple(
            eg.TapeArray.from_values([tape.lift(v) for v in pos[:, a]]) for a in range(3)
        )
        dir_cols = tuple(eg.TapeArray.constants(dirs[:, a]) for a in range(3))
    else:
        pos_cols = tuple(np.ascontiguousarray(pos[:, a]) for a in range(3))
        dir_cols = tuple(np.ascontiguousarray(dirs[:, a]) for a in range(3))
    (ux, uy, uz), amps, mask, _ = run_newton(
        volume, pos_cols, dir_cols, constants, tape=tape
    )
    out_dirs = np.stack([eg.values(ux), eg.values(uy), eg.values(uz)], axis=1)
    return PeakBatch(
        directions=out_dirs,
        amplitudes=np.asarray(eg.values(amps), dtype=np.float64),
        update_mask=mask,
        iterations_run=constants.max_iterations,
    )


def newton_step(coeffs, direction, constants):
    """A single Newton iteration for one direction.

    Returns (new_direction, dt, amplitude), with the amplitude evaluated at
    the input direction.
    """
    d = _check_directions(np.asarray(direction, dtype=np.float64)[None, :])[0]
    plan = basis_plan(coeffs.lmax)
    cols = [np.array([float(v)]) for v in coeffs.values]
    nx, ny, nz, dt, amp, _ = newton_iteration(
        plan,
        coeffs.lmax,
        cols,
        np.array([d[0]]),
        np.array([d[1]]),
        np.array([d[2]]),
        constants,
    )
    if not (
        math.isfinite(nx[0]) and math.isfinite(ny[0]) and math.isfinite(nz[0])
    ):
        raise InvalidDirectionError(f"Newton step produced a non-finite direction from {d}")
    return np.array([nx[0], ny[0], nz[0]]), float(dt[0]), float(amp[0])


def find_peaks_sequential_reference(volume, position, init_direction, constants):
    """Early-returning single-direction ascent (test oracle).

    Faithful to the classic control flow: the update is applied, then the
    loop returns the pre-update amplitude once the step drops below the
    tolerance.  Exhausting the iteration budget returns NaN direction and
    amplitude with ``converged=False``.
    """
    pos = np.asarray(position, dtype=np.float64)
    d = _check_directions(np.asarray(init_direction, dtype=np.float64)[None, :])
    plan = basis_plan(volume.lmax)
    px, py, pz = world_to_voxel_batch(volume, pos[0:1], pos[1:2], pos[2:3])
    coeff_cols = interpolate_batch(volume, px, py, pz)
    ux = np.array([d[0, 0]])
    uy = np.array([d[0, 1]])
    uz = np.array([d[0, 2]])
    for _ in range(constants.max_iterations):
        ux, uy, uz, dt, amp, _ = newton_iteration(
            plan, volume.lmax, coeff_cols, ux, uy, uz, constants
        )
        if dt[0] < constants.angle_tolerance:
            return np.array([ux[0], uy[0], uz[0]]), float(amp[0]), True
    return np.full(3, np.nan), float("nan"), False
