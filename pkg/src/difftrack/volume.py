"""FOD coefficient grids, binary masks, and trilinear interpolation.

Tracking runs in world millimetres; conversion to continuous voxel
coordinates happens only here.  The valid image domain is the set of
positions whose full trilinear stencil exists: ``0 <= p <= dim - 1`` per
axis.  Mask lookups are nearest-neighbour (binary semantics, gradient-free
by contract).

The batched interpolation helper is shared by the peak finder and the
propagator and runs in both execution worlds; when a tape is attached the
touched voxel coefficients become registered tape inputs, so the stencil
weight is exactly the local partial of each interpolated coefficient.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import engine as eg
from .errors import (
    DimensionMismatchError,
    DomainError,
    InvalidParameterError,
)
from .shbasis import ShCoefficients, num_coefficients

# Stencil corner order: x-major bit pattern (dx, dy, dz) for dx, dy, dz in {0, 1}.
_CORNERS = [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]


@dataclass(frozen=True)
class FodVolume:
    """Dense grid of SH coefficient vectors with voxel-to-world geometry."""

    dims: tuple
    lmax: int
    coeffs: np.ndarray
    voxel_size: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise InvalidParameterError(f"bad dims {dims}")
        k = num_coefficients(self.lmax)
        coeffs = np.ascontiguousarray(self.coeffs, dtype=np.float64)
        if coeffs.shape != (*dims, k):
            raise DimensionMismatchError(
                f"coeffs shape {coeffs.shape} != {(*dims, k)} for lmax={self.lmax}"
            )
        if not np.all(np.isfinite(coeffs)):
            raise InvalidParameterError("coefficient grid contains non-finite values")
        object.__setattr__(self, "coeffs", coeffs)
        vs = np.asarray(self.voxel_size, dtype=np.float64)
        if vs.shape != (3,) or np.any(vs <= 0):
            raise InvalidParameterError(f"voxel_size must be 3 positive values, got {vs}")
        object.__setattr__(self, "voxel_size", vs)
        aff = np.asarray(self.affine, dtype=np.float64)
        if aff.shape != (4, 4):
            raise InvalidParameterError("affine must be 4x4")
        try:
            inv = np.linalg.inv(aff)
        except np.linalg.LinAlgError as e:
            raise InvalidParameterError("affine is not invertible") from e
        object.__setattr__(self, "affine", aff)
        object.__setattr__(self, "_inv_affine", inv)

    @property
    def n_coefficients(self):
        return num_coefficients(self.lmax)


@dataclass(frozen=True)
class BinaryMask:
    """One bit per voxel, on the same grid/affine as its paired volume."""

    dims: tuple
    values: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        vals = np.ascontiguousarray(self.values).astype(bool)
        if vals.shape != dims:
            raise DimensionMismatchError(f"mask shape {vals.shape} != dims {dims}")
        object.__setattr__(self, "values", vals)
        aff = np.asarray(self.affine, dtype=np.float64)
        if aff.shape != (4, 4):
            raise InvalidParameterError("affine must be 4x4")
        object.__setattr__(self, "affine", aff)
        object.__setattr__(self, "_inv_affine", np.linalg.inv(aff))

    def n_set(self):
        return int(self.values.sum())


@dataclass(frozen=True)
class InterpolationStencil:
    """The 8 voxel corners around a query point and their weights."""

    corner_indices: np.ndarray
    weights: np.ndarray


def check_grid_compatible(volume, mask, what="mask"):
    if tuple(mask.dims) != tuple(volume.dims):
        raise DimensionMismatchError(
            f"{what} dims {mask.dims} do not match volume dims {volume.dims}"
        )
    if not np.allclose(mask.affine, volume.affine, atol=1e-5):
        raise DimensionMismatchError(f"{what} affine differs from volume affine")


def world_to_voxel(volume, pos):
    """Continuous voxel coordinate of a world-mm position."""
    p = np.asarray(pos, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise InvalidParameterError(f"position must be finite, got {pos!r}")
    inv = volume._inv_affine
    return inv[:3, :3] @ p + inv[:3, 3]


def voxel_to_world(volume, vox):
    v = np.asarray(vox, dtype=np.float64)
    return volume.affine[:3, :3] @ v + volume.affine[:3, 3]


def in_bounds(volume, voxel_pos):
    """True iff the full trilinear stencil exists at ``voxel_pos``."""
    p = np.asarray(voxel_pos, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        return False
    return bool(
        np.all(p >= 0.0) and np.all(p <= np.asarray(volume.dims, dtype=np.float64) - 1.0)
    )


def trilinear_stencil(voxel_pos, dims):
    """Corner indices and weights of the trilinear stencil at ``voxel_pos``.

    At the exact upper edge of an axis the cell is clamped so the stencil
    still exists (the fraction becomes 1.0 and the lower corners get zero
    weight).
    """
    p = np.asarray(voxel_pos, dtype=np.float64)
    dims = tuple(int(d) for d in dims)
    if not (
        np.all(np.isfinite(p))
        and np.all(p >= 0.0)
        and np.all(p <= np.asarray(dims, dtype=np.float64) - 1.0)
    ):
        raise DomainError(f"voxel position {p} outside image domain {dims}", position=p)
    cell = [min(int(math.floor(p[a])), max(dims[a] - 2, 0)) for a in range(3)]
    frac = [p[a] - cell[a] for a in range(3)]
    corners = np.zeros((8, 3), dtype=np.int64)
    weights = np.zeros(8)
    for c, (dx, dy, dz) in enumerate(_CORNERS):
        corners[c] = (cell[0] + dx, cell[1] + dy, cell[2] + dz)
        wx = frac[0] if dx else 1.0 - frac[0]
        wy = frac[1] if dy else 1.0 - frac[1]
        wz = frac[2] if dz else 1.0 - frac[2]
        weights[c] = wx * wy * wz
    # degenerate single-voxel axes: collapse the +1 corner back in bounds
    for a in range(3):
        if dims[a] == 1:
            corners[:, a] = 0
    return InterpolationStencil(corner_indices=corners, weights=weights)


def interpolate_coeffs(volume, pos, tape=None):
    """Trilinearly interpolated SH coefficients at world position ``pos``.

    Without a tape this returns a plain :class:`ShCoefficients`.  With a
    tape the result's values are DiffValues whose leaves are the touched
    voxel coefficients, registered under ``((i, j, k), coeff_index)``.
    """
    vox = world_to_voxel(volume, pos)
    if not in_bounds(volume, vox):
        raise DomainError(
            f"position {np.asarray(pos)} maps to voxel {vox}, outside the image domain",
            position=np.asarray(pos, dtype=np.float64),
        )
    st = trilinear_stencil(vox, volume.dims)
    k = volume.n_coefficients
    if tape is None:
        out = np.zeros(k)
        for c in range(8):
            i, j, l = st.corner_indices[c]
            out += st.weights[c] * volume.coeffs[i, j, l]
        return ShCoefficients(values=out, lmax=volume.lmax)
    cols = []
    for kk in range(k):
        parts = []
        for c in range(8):
            i, j, l = (int(v) for v in st.corner_indices[c])
            leaf = tape.input(((i, j, l), kk), volume.coeffs[i, j, l, kk])
            parts.append(tape.constant(st.weights[c]) * leaf)
        cols.append(eg.tree_sum(parts))
    vals = np.empty(k, dtype=object)
    vals[:] = cols
    return ShCoefficients(values=vals, lmax=volume.lmax)


def mask_contains(mask, pos):
    """Nearest-neighbour mask lookup; positions off the grid are False."""
    p = np.asarray(pos, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        return False
    inv = mask._inv_affine
    vox = inv[:3, :3] @ p + inv[:3, 3]
    idx = np.floor(vox + 0.5).astype(np.int64)
    for a in range(3):
        if idx[a] < 0 or idx[a] >= mask.dims[a]:
            return False
    return bool(mask.values[idx[0], idx[1], idx[2]])


# ---------------------------------------------------------------------------
# batched internals shared by the peak finder and the propagator
# ---------------------------------------------------------------------------


def world_to_voxel_batch(volume, wx, wy, wz):
    """Batched affine inverse; works on plain arrays and TapeArrays."""
    inv = volume._inv_affine
    px = inv[0, 0] * wx + inv[0, 1] * wy + inv[0, 2] * wz + inv[0, 3]
    py = inv[1, 0] * wx + inv[1, 1] * wy + inv[1, 2] * wz + inv[1, 3]
    pz = inv[2, 0] * wx + inv[2, 1] * wy + inv[2, 2] * wz + inv[2, 3]
    return px, py, pz


def in_bounds_batch(volume, px, py, pz):
    x, y, z = eg.values(px), eg.values(py), eg.values(pz)
    dims = volume.dims
    ok = np.isfinite(x) & np.isfinite(y) & np.isfinite(z)
    ok &= (x >= 0.0) & (x <= dims[0] - 1.0)
    ok &= (y >= 0.0) & (y <= dims[1] - 1.0)
    ok &= (z >= 0.0) & (z <= dims[2] - 1.0)
    return ok


def mask_contains_batch(mask, wx, wy, wz):
    inv = mask._inv_affine
    x = eg.values(wx)
    y = eg.values(wy)
    z = eg.values(wz)
    px = inv[0, 0] * x + inv[0, 1] * y + inv[0, 2] * z + inv[0, 3]
    py = inv[1, 0] * x + inv[1, 1] * y + inv[1, 2] * z + inv[1, 3]
    pz = inv[2, 0] * x + inv[2, 1] * y + inv[2, 2] * z + inv[2, 3]
    with np.errstate(invalid="ignore"):
        ix = np.floor(px + 0.5)
        iy = np.floor(py + 0.5)
        iz = np.floor(pz + 0.5)
    finite = np.isfinite(ix) & np.isfinite(iy) & np.isfinite(iz)
    inside = (
        finite
        & (ix >= 0)
        & (ix < mask.dims[0])
        & (iy >= 0)
        & (iy < mask.dims[1])
        & (iz >= 0)
        & (iz < mask.dims[2])
    )
    out = np.zeros(len(inside), dtype=bool)
    if inside.any():
        ii = ix[inside].astype(np.int64)
        jj = iy[inside].astype(np.int64)
        kk = iz[inside].astype(np.int64)
        out[inside] = mask.values[ii, jj, kk]
    return out


def _cell_and_frac(volume, px, py, pz):
    """Clamped cell indices (plain ints) and fractional offsets per element.

    Out-of-domain positions are clamped to the nearest valid cell so that
    evaluation never faults; callers discard those lanes via masks.  The
    fractions are live (taped) values: cells are piecewise-constant and
    therefore gradient-stopping.
    """
    dims = volume.dims
    xv, yv, zv = eg.values(px), eg.values(py), eg.values(pz)
    with np.errstate(invalid="ignore"):
        cx = np.clip(np.floor(np.nan_to_num(xv)), 0, max(dims[0] - 2, 0)).astype(np.int64)
        cy = np.clip(np.floor(np.nan_to_num(yv)), 0, max(dims[1] - 2, 0)).astype(np.int64)
        cz = np.clip(np.floor(np.nan_to_num(zv)), 0, max(dims[2] - 2, 0)).astype(np.int64)
    fx = px - cx.astype(np.float64)
    fy = py - cy.astype(np.float64)
    fz = pz - cz.astype(np.float64)
    # clamp fractions of discarded out-of-domain lanes into [0, 1]
    fx = eg.vclamp(fx, 0.0, 1.0)
    fy = eg.vclamp(fy, 0.0, 1.0)
    fz = eg.vclamp(fz, 0.0, 1.0)
    return (cx, cy, cz), (fx, fy, fz)


def interpolate_batch(volume, px, py, pz, tape=None, coeff_offsets=None):
    """Interpolated coefficient columns at a batch of voxel coordinates.

    Returns a length-K list of (B,) values (plain arrays or TapeArrays).
    ``coeff_offsets`` optionally perturbs, per element, one voxel
    coefficient by a given amount: a list of ``(i, j, k, coeff, amount)``
    or None per element (plain mode only; used by finite-difference
    harnesses to batch perturbed reruns).
    """
    (cx, cy, cz), (fx, fy, fz) = _cell_and_frac(volume, px, py, pz)
    taped = tape is not None
    K = volume.n_coefficients
    dims = volume.dims
    # single-voxel axes collapse the +1 corner (its weight is zero there)
    step = (1 if dims[0] > 1 else 0, 1 if dims[1] > 1 else 0, 1 if dims[2] > 1 else 0)
    one_minus = lambda f: 1.0 - f
    wx = (one_minus(fx), fx)
    wy = (one_minus(fy), fy)
    wz = (one_minus(fz), fz)

    if not taped:
        weights = []
        gathered = []
        for dx, dy, dz in _CORNERS:
            w = wx[dx] * wy[dy] * wz[dz]
            weights.append(w)
            gathered.append(
                volume.coeffs[cx + dx * step[0], cy + dy * step[1], cz + dz * step[2], :]
            )  # (B, K)
        cols = []
        for k in range(K):
            cols.append(eg.tree_sum([weights[c] * gathered[c][:, k] for c in range(8)]))
        if coeff_offsets is not None:
            for e, off in enumerate(coeff_offsets):
                if off is None:
                    continue
                oi, oj, ok, okk, amount = off
                for c, (dx, dy, dz) in enumerate(_CORNERS):
                    if (
                        cx[e] + dx * step[0] == oi
                        and cy[e] + dy * step[1] == oj
                        and cz[e] + dz * step[2] == ok
                    ):
                        cols[okk][e] += float(weights[c][e]) * amount
        return cols

    B = len(cx)
    weights = []
    for dx, dy, dz in _CORNERS:
        weights.append(wx[dx] * wy[dy] * wz[dz])
    cols = []
    for k in range(K):
        col_entries = []
        for e in range(B):
            parts = []
            for c, (dx, dy, dz) in enumerate(_CORNERS):
                i = int(cx[e] + dx * step[0])
                j = int(cy[e] + dy * step[1])
                l = int(cz[e] + dz * step[2])
                leaf = tape.input(((i, j, l), k), volume.coeffs[i, j, l, k])
                parts.append(weights[c][e] * leaf)
            col_entries.append(eg.tree_sum(parts))
        cols.append(eg.TapeArray.from_values(col_entries))
    return cols
