"""Reader/writer for a strict NIfTI-1 subset.

Supported layout: single-file image, 348-byte header plus 4 padding bytes,
little-endian float32 data at vox_offset 352, dim[0] == 4 with dim[4] the
coefficient count, magic "n+1\\0", sform affine rows present.  Data is
stored x-fastest (Fortran order over the spatial axes, coefficient axis
slowest), matching what standard CSD pipelines emit for SH volumes.
Anything outside the subset is rejected with a descriptive error carrying
the byte offset of the offending field.  Masks are the same layout with a
single coefficient per voxel, thresholded at 0.5 on load.
"""

import struct

import numpy as np

from .errors import FormatError, InvalidParameterError
from .shbasis import LMAX_LIMIT, num_coefficients
from .volume import BinaryMask, FodVolume

HEADER_SIZE = 348
VOX_OFFSET = 352
DTYPE_FLOAT32 = 16
MAGIC = b"n+1\x00"
_MAX_DIM = 1 << 15


def _lmax_for(k):
    for lmax in range(0, LMAX_LIMIT + 1, 2):
        if num_coefficients(lmax) == k:
            return lmax
    raise FormatError(
        f"coefficient count {k} does not match any even band limit <= {LMAX_LIMIT}",
        offset=48,
    )


def save_volume(path, volume):
    """Write a volume (or 1-coefficient mask image) in the subset layout."""
    nx, ny, nz = volume.dims
    k = volume.coeffs.shape[-1]
    data = np.ascontiguousarray(
        volume.coeffs.transpose(3, 2, 1, 0), dtype="<f4"
    )  # x fastest on disk
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<B", header, 39, 0)
    struct.pack_into("<8h", header, 40, 4, nx, ny, nz, k, 1, 1, 1)
    struct.pack_into("<h", header, 70, DTYPE_FLOAT32)
    struct.pack_into("<h", header, 72, 32)
    vs = volume.voxel_size
    struct.pack_into("<8f", header, 76, 1.0, vs[0], vs[1], vs[2], 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, float(VOX_OFFSET))
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<f", header, 116, 0.0)  # scl_inter
    struct.pack_into("<B", header, 123, 2)  # units: mm
    struct.pack_into("<h", header, 252, 0)  # qform_code
    struct.pack_into("<h", header, 254, 1)  # sform_code
    aff = volume.affine
    struct.pack_into("<4f", header, 280, *aff[0])
    struct.pack_into("<4f", header, 296, *aff[1])
    struct.pack_into("<4f", header, 312, *aff[2])
    struct.pack_into("<4s", header, 344, MAGIC)
    with open(path, "wb") as f:
        f.write(bytes(header))
        f.write(b"\x00\x00\x00\x00")  # extension flag
        f.write(data.tobytes())


def _load_raw(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < VOX_OFFSET:
        raise FormatError(
            f"file too short for a NIfTI-1 header: {len(blob)} bytes", offset=0
        )
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise FormatError(f"sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE}", offset=0)
    magic = struct.unpack_from("<4s", blob, 344)[0]
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=344)
    dim = struct.unpack_from("<8h", blob, 40)
    if dim[0] != 4:
        raise FormatError(f"dim[0] is {dim[0]}, expected 4", offset=40)
    nx, ny, nz, k = dim[1], dim[2], dim[3], dim[4]
    if min(nx, ny, nz, k) < 1 or max(nx, ny, nz, k) > _MAX_DIM:
        raise FormatError(f"implausible dims {(nx, ny, nz, k)}", offset=42)
    (datatype,) = struct.unpack_from("<h", blob, 70)
    if datatype != DTYPE_FLOAT32:
        raise FormatError(
            f"unsupported datatype code {datatype} (only float32 code 16)", offset=70
        )
    (bitpix,) = struct.unpack_from("<h", blob, 72)
    if bitpix != 32:
        raise FormatError(f"bitpix {bitpix} inconsistent with float32", offset=72)
    pixdim = struct.unpack_from("<8f", blob, 76)
    (vox_offset,) = struct.unpack_from("<f", blob, 108)
    if vox_offset != float(VOX_OFFSET):
        raise FormatError(f"vox_offset {vox_offset} unsupported (expected {VOX_OFFSET})", offset=108)
    (sform_code,) = struct.unpack_from("<h", blob, 254)
    if sform_code < 1:
        raise FormatError("sform affine rows absent (sform_code < 1)", offset=254)
    rows = [struct.unpack_from("<4f", blob, off) for off in (280, 296, 312)]
    affine = np.array(rows + [[0.0, 0.0, 0.0, 1.0]], dtype=np.float64)
    expected = nx * ny * nz * k * 4
    actual = len(blob) - VOX_OFFSET
    if actual != expected:
        raise FormatError(
            f"data block has {actual} bytes, expected {expected} "
            f"for dims {(nx, ny, nz, k)}",
            offset=VOX_OFFSET,
        )
    raw = np.frombuffer(blob, dtype="<f4", count=nx * ny * nz * k, offset=VOX_OFFSET)
    data = raw.reshape(k, nz, ny, nx).transpose(3, 2, 1, 0).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise FormatError("data block contains non-finite values", offset=VOX_OFFSET)
    voxel_size = np.array(pixdim[1:4], dtype=np.float64)
    if np.any(voxel_size <= 0):
        raise FormatError(f"non-positive pixdim {tuple(voxel_size)}", offset=76)
    return (nx, ny, nz), k, data, voxel_size, affine


def load_volume(path):
    """Load an FOD coefficient volume; the band limit is inferred from K."""
    dims, k, data, voxel_size, affine = _load_raw(path)
    lmax = _lmax_for(k)
    try:
        return FodVolume(
            dims=dims, lmax=lmax, coeffs=data, voxel_size=voxel_size, affine=affine
        )
    except InvalidParameterError as e:
        raise FormatError(str(e)) from e


def save_mask(path, mask):
    # BinaryMask carries no pixdim; derive voxel sizes from the affine columns
    vs = np.sqrt((mask.affine[:3, :3] ** 2).sum(axis=0))
    vol = FodVolume(
        dims=mask.dims,
        lmax=0,
        coeffs=mask.values.astype(np.float64)[..., None],
        voxel_size=vs,
        affine=mask.affine,
    )
    save_volume(path, vol)


def load_mask(path):
    """Load a mask image (one value per voxel, thresholded at 0.5)."""
    dims, k, data, _, affine = _load_raw(path)
    if k != 1:
        raise FormatError(f"mask image must have one value per voxel, got {k}", offset=48)
    return BinaryMask(dims=dims, values=data[..., 0] > 0.5, affine=affine)
