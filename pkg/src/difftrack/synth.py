"""Synthetic FOD fields with closed-form peak directions.

Lobes are band-limited projections of (antipodally symmetrized) axial delta
functions: the coefficient vector of a lobe along axis ``a`` is just the
basis evaluated at ``a``, so by the addition theorem the field is
f(v . a) = sum_l (2l+1)/(4pi) P_l(v . a), peaked exactly at +/-a.  These
fields drive every geometric oracle in the test suite:

* isotropic      - constant amplitude in all directions
* single-lobe    - one constant axis, optional linear amplitude ramp
* bent-lobe      - axis rotates smoothly with the x index (flat, then a
                   smoothstep swing), exercising the curvature criterion
* two-crossing   - two superposed lobes along distinct axes
"""

import math

import numpy as np

from .errors import InvalidParameterError
from .shbasis import cartesian_to_angles, eval_basis, num_coefficients
from .volume import BinaryMask, FodVolume

KINDS = ("isotropic", "single-lobe", "bent-lobe", "two-crossing")


def default_affine(voxel_size):
    vs = np.asarray(voxel_size, dtype=np.float64)
    aff = np.eye(4)
    aff[0, 0], aff[1, 1], aff[2, 2] = vs
    return aff


def lobe_coefficients(axis, lmax):
    """Coefficients of a unit lobe along ``axis`` (basis evaluated there)."""
    a = np.asarray(axis, dtype=np.float64)
    norm = np.sqrt((a * a).sum())
    if norm < 1e-12:
        raise InvalidParameterError("lobe axis must be non-zero")
    return eval_basis(cartesian_to_angles(a / norm), lmax)


def lobe_peak_amplitude(lmax):
    """Field value of a unit lobe at its own axis: sum over even l of (2l+1)/(4pi)."""
    return sum((2 * l + 1) / (4 * math.pi) for l in range(0, lmax + 1, 2))


def _fill(dims, per_voxel_coeffs):
    dims = tuple(int(d) for d in dims)
    k = per_voxel_coeffs.shape[-1]
    out = np.zeros((*dims, k))
    out[...] = per_voxel_coeffs
    return out


def _gain_profile(dims, gain_axis, gain_range):
    """Per-voxel scalar gain, linear in one voxel index."""
    if gain_axis is None:
        return None
    dims = tuple(int(d) for d in dims)
    lo, hi = gain_range
    n = dims[gain_axis]
    line = np.linspace(lo, hi, n) if n > 1 else np.array([lo])
    shape = [1, 1, 1]
    shape[gain_axis] = n
    return line.reshape(shape) * np.ones(dims)


def make_isotropic(dims, lmax, voxel_size=(1.0, 1.0, 1.0), amplitude=1.0):
    """Constant field with the given amplitude in every direction."""
    k = num_coefficients(lmax)
    c = np.zeros(k)
    c[0] = amplitude * 2.0 * math.sqrt(math.pi)
    return FodVolume(
        dims=dims,
        lmax=lmax,
        coeffs=_fill(dims, c),
        voxel_size=voxel_size,
        affine=default_affine(voxel_size),
    )


def make_single_lobe(
    dims,
    lmax,
    axis=(1.0, 0.0, 0.0),
    voxel_size=(1.0, 1.0, 1.0),
    gain_axis=None,
    gain_range=(1.0, 0.25),
):
    """One lobe along a constant axis; optional linear gain ramp per voxel."""
    c = lobe_coefficients(axis, lmax)
    coeffs = _fill(dims, c)
    gain = _gain_profile(dims, gain_axis, gain_range)
    if gain is not None:
        coeffs = coeffs * gain[..., None]
    return FodVolume(
        dims=dims,
        lmax=lmax,
        coeffs=coeffs,
        voxel_size=voxel_size,
        affine=default_affine(voxel_size),
    )


def bent_lobe_axis(x_index, bend_start, bend_width, bend_degrees):
    """Lobe axis at one x index: +x rotated toward +y by a smoothstep profile."""
    t = (x_index - bend_start) / bend_width
    t = min(1.0, max(0.0, t))
    s = t * t * (3.0 - 2.0 * t)
    ang = math.radians(bend_degrees) * s
    return np.array([math.cos(ang), math.sin(ang), 0.0])


def make_bent_lobe(
    dims,
    lmax,
    voxel_size=(1.0, 1.0, 1.0),
    bend_start=None,
    bend_width=1.0,
    bend_degrees=60.0,
):
    """Lobe axis rotating smoothly with the x index (flat before the bend)."""
    dims = tuple(int(d) for d in dims)
    if bend_start is None:
        bend_start = dims[0] / 2.0
    k = num_coefficients(lmax)
    coeffs = np.zeros((*dims, k))
    for i in range(dims[0]):
        axis = bent_lobe_axis(i, bend_start, bend_width, bend_degrees)
        coeffs[i, :, :, :] = lobe_coefficients(axis, lmax)
    return FodVolume(
        dims=dims,
        lmax=lmax,
        coeffs=coeffs,
        voxel_size=voxel_size,
        affine=default_affine(voxel_size),
    )


def make_two_crossing(
    dims,
    lmax,
    axis_a=(1.0, 0.0, 0.0),
    axis_b=(0.0, 0.0, 1.0),
    voxel_size=(1.0, 1.0, 1.0),
):
    """Superposition of two unit lobes along distinct axes."""
    c = lobe_coefficients(axis_a, lmax) + lobe_coefficients(axis_b, lmax)
    return FodVolume(
        dims=dims,
        lmax=lmax,
        coeffs=_fill(dims, c),
        voxel_size=voxel_size,
        affine=default_affine(voxel_size),
    )


def make_volume(kind, dims, lmax, axis=(1.0, 0.0, 0.0), voxel_size=(1.0, 1.0, 1.0)):
    """Dispatch helper used by the CLI synth command."""
    if kind == "isotropic":
        return make_isotropic(dims, lmax, voxel_size)
    if kind == "single-lobe":
        return make_single_lobe(dims, lmax, axis, voxel_size)
    if kind == "bent-lobe":
        return make_bent_lobe(dims, lmax, voxel_size)
    if kind == "two-crossing":
        return make_two_crossing(dims, lmax, axis_a=axis, voxel_size=voxel_size)
    raise InvalidParameterError(f"unknown synthetic field kind {kind!r} (choose from {KINDS})")


def full_mask(volume):
    """Mask covering every voxel of ``volume``."""
    return BinaryMask(
        dims=volume.dims, values=np.ones(volume.dims, dtype=bool), affine=volume.affine
    )


def box_mask(volume, lo, hi):
    """Mask set on the voxel-index box [lo, hi] (inclusive) only."""
    vals = np.zeros(volume.dims, dtype=bool)
    lo = tuple(int(v) for v in lo)
    hi = tuple(int(v) for v in hi)
    vals[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1] = True
    return BinaryMask(dims=volume.dims, values=vals, affine=volume.affine)
