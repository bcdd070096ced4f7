"""Shared oracles for the test suite.

Everything here is deliberately independent of the code paths under test:
dense spherical grids locate maxima by brute force, the scalar reference
propagator transcribes the classic early-breaking control flow, and the
dual-number (complex-step) probe differentiates the forward pipeline
without touching the reverse-mode tape.
"""

import math

import numpy as np

from difftrack import FodVolume, TerminationReason
from difftrack.shbasis import basis_plan, eval_stack
from difftrack.volume import (
    in_bounds,
    mask_contains,
    world_to_voxel,
)
from difftrack import engine as eg


def grid_directions(step_deg):
    """All (el, az) grid directions at the given spacing, as unit vectors."""
    els = np.arange(step_deg / 2.0, 180.0, step_deg) * math.pi / 180.0
    azs = np.arange(-180.0, 180.0, step_deg) * math.pi / 180.0
    el, az = np.meshgrid(els, azs, indexing="ij")
    el = el.ravel()
    az = az.ravel()
    sin_el = np.sin(el)
    dirs = np.stack(
        [sin_el * np.cos(az), sin_el * np.sin(az), np.cos(el)], axis=1
    )
    return dirs


def basis_matrix(directions, lmax):
    """(G, K) basis values at unit directions, via the batched kernel."""
    d = np.asarray(directions, dtype=np.float64)
    el = eg.vacos(d[:, 2])
    az = eg.vatan2(d[:, 1], d[:, 0])
    stack = eval_stack(
        basis_plan(lmax),
        eg.vcos(el),
        eg.vsin(el),
        eg.vcos(az),
        eg.vsin(az),
        lmax,
        want_derivs=False,
    )
    cols = []
    n = len(d)
    for col in stack[0]:
        cols.append(np.full(n, col) if isinstance(col, float) else col)
    return np.stack(cols, axis=1)


_COARSE = grid_directions(1.0)
_COARSE_BASIS = {}


def _coarse_basis(lmax):
    if lmax not in _COARSE_BASIS:
        _COARSE_BASIS[lmax] = basis_matrix(_COARSE, lmax)
    return _COARSE_BASIS[lmax]


def dense_grid_max(coeff_vector, lmax, refine_deg=0.1):
    """Brute-force FOD maximum: 1-degree sweep plus a local refinement grid."""
    c = np.asarray(coeff_vector, dtype=np.float64)
    amps = _coarse_basis(lmax) @ c
    best = _COARSE[int(np.argmax(amps))]
    # local tangent-plane grid at the refinement resolution
    up = np.array([0.0, 0.0, 1.0]) if abs(best[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    t1 = np.cross(best, up)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(best, t1)
    span = np.deg2rad(np.arange(-1.0, 1.0 + 1e-9, refine_deg))
    a, b = np.meshgrid(span, span, indexing="ij")
    local = (
        best[None, :]
        + a.ravel()[:, None] * t1[None, :]
        + b.ravel()[:, None] * t2[None, :]
    )
    local /= np.linalg.norm(local, axis=1)[:, None]
    amps = basis_matrix(local, lmax) @ c
    return local[int(np.argmax(amps))]


def angle_between(a, b):
    return math.acos(min(1.0, max(-1.0, float(np.dot(a, b)))))


def random_smooth_coeffs(rng, lmax, decay=1.5):
    """Random band-limited coefficients with a decaying power spectrum."""
    from difftrack import num_coefficients

    c = np.zeros(num_coefficients(lmax))
    for l in range(0, lmax + 1, 2):
        for m in range(-l, l + 1):
            k = l * (l + 1) // 2 + m
            c[k] = rng.standard_normal() / (1.0 + l) ** decay
    return c


def _newton_scalar(volume, x, u, constants):
    """Early-breaking single-direction ascent sharing the batched kernel."""
    from difftrack.peaks import newton_iteration, _amplitude_batch

    plan = basis_plan(volume.lmax)
    from difftrack.volume import interpolate_batch, world_to_voxel_batch

    px, py, pz = world_to_voxel_batch(
        volume, np.array([x[0]]), np.array([x[1]]), np.array([x[2]])
    )
    cols = interpolate_batch(volume, px, py, pz)
    ux = np.array([u[0]])
    uy = np.array([u[1]])
    uz = np.array([u[2]])
    for _ in range(constants.max_iterations):
        ux, uy, uz, dt, _, _ = newton_iteration(
            plan, volume.lmax, cols, ux, uy, uz, constants
        )
        if dt[0] < constants.angle_tolerance:
            break
    amp = _amplitude_batch(plan, volume.lmax, cols, ux, uy, uz)
    return np.array([ux[0], uy[0], uz[0]]), float(amp[0])


def scalar_reference_propagate(volume, mask, position, direction, accepted, params, constants, reject_reason=None):
    """Single-streamline early-breaking transcription (test oracle).

    Mirrors the batched criteria order on the same per-element values, so
    valid prefixes and termination reasons must agree bit for bit.
    """
    x = np.asarray(position, dtype=np.float64).copy()
    points = [x.copy()]
    if not accepted:
        return points, (reject_reason or TerminationReason.SEED_REJECTED)
    d, amp = _newton_scalar(volume, x, np.asarray(direction, dtype=np.float64), constants)
    d_prev = None
    cos_thresh = math.cos(params.angle_threshold)
    t = 0
    while True:
        if t == params.max_points - 1:
            return points, TerminationReason.LENGTH_EXCEED
        if not in_bounds(volume, world_to_voxel(volume, x)):
            return points, TerminationReason.EXIT_IMAGE
        if amp < params.amplitude_threshold:
            return points, TerminationReason.MODEL
        if d_prev is not None:
            cosang = (d_prev[None, :] * d[None, :]).sum(axis=1)[0]
            if cosang < cos_thresh:
                return points, TerminationReason.HIGH_CURVATURE
        x_next = x + params.step_size * d
        d_next, amp_next = _newton_scalar(volume, x_next, d, constants)
        if not mask_contains(mask, x_next):
            return points, TerminationReason.EXIT_MASK
        points.append(x_next.copy())
        d_prev = d
        x, d, amp = x_next, d_next, amp_next
        t += 1


def complex_step_volume(volume, voxel, coeff, eps=1e-150):
    """Volume with one coefficient dual-perturbed (imaginary part eps).

    Running the plain pipeline on it propagates the perturbation to first
    order; Im(output)/eps is the exact forward-mode derivative.  Test
    harness only.
    """
    coeffs = volume.coeffs.astype(complex)
    i, j, k = voxel
    coeffs[i, j, k, coeff] += 1j * eps
    dual = object.__new__(FodVolume)
    for field in ("dims", "lmax", "voxel_size", "affine", "_inv_affine"):
        object.__setattr__(dual, field, getattr(volume, field))
    object.__setattr__(dual, "coeffs", coeffs)
    return dual
