"""CSV tables: seed pairings, gradient-check dumps, distance reports.

RFC-4180-style with a header row and '.' decimal separator.  Floats are
written with repr (shortest round-trip), so reloading a seed table
reproduces the original values bit-exactly.
"""

import csv

import numpy as np

from .errors import FormatError, InvalidInputError


def save_seed_table(path, positions, directions):
    pos = np.asarray(positions, dtype=np.float64)
    dirs = np.asarray(directions, dtype=np.float64)
    if pos.shape != dirs.shape or pos.ndim != 2 or pos.shape[1] != 3:
        raise InvalidInputError("positions/directions must both be (N, 3)")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "x", "y", "z", "dx", "dy", "dz"])
        for i in range(len(pos)):
            w.writerow(
                [i]
                + [repr(float(v)) for v in pos[i]]
                + [repr(float(v)) for v in dirs[i]]
            )


def load_seed_table(path):
    positions = []
    directions = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != [
            "seed",
            "x",
            "y",
            "z",
            "dx",
            "dy",
            "dz",
        ]:
            raise FormatError(f"unexpected seed table header {header!r}")
        for row in reader:
            if not row:
                continue
            if len(row) != 7:
                raise FormatError(f"seed table row has {len(row)} fields, expected 7")
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError as e:
                raise FormatError(f"non-numeric seed table entry in {row!r}") from e
            positions.append(vals[:3])
            directions.append(vals[3:])
    if not positions:
        raise FormatError("seed table holds no rows")
    pos = np.array(positions)
    dirs = np.array(directions)
    norms = np.sqrt((dirs * dirs).sum(axis=1))
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise FormatError("seed table directions are not unit length within 1e-6")
    return pos, dirs


def save_gradcheck_table(path, rows):
    """Rows of (voxel ijk, coeff, analytic, numeric, rel_err)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["voxel_i", "voxel_j", "voxel_k", "coeff", "analytic", "numeric", "rel_err"])
        for (i, j, k), coeff, analytic, numeric, rel_err in rows:
            w.writerow([i, j, k, coeff, repr(analytic), repr(numeric), repr(rel_err)])


def save_distance_table(path, distances):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["pair", "distance_mm"])
        for i, d in enumerate(distances):
            w.writerow([i, repr(float(d))])
