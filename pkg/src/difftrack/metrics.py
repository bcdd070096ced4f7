"""Streamline agreement metrics: pairwise Hausdorff distance, percentiles.

Distances are point-set based (no segment interpolation): the directed
distance from A to B is the largest over points of A of the distance to
the closest point of B.  Percentiles use the nearest-rank definition
(ceil(p/100 * n)-th order statistic).
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

DEFAULT_RANKS = (10, 50, 95, 99)


def _as_points(s, name):
    p = np.asarray(s, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or len(p) == 0:
        raise InvalidInputError(f"{name} must be a non-empty (P, 3) point list")
    if not np.all(np.isfinite(p)):
        raise InvalidInputError(f"{name} contains non-finite coordinates")
    return p


def directed_hausdorff(a, b):
    """max over p in a of min over q in b of |p - q| (mm)."""
    pa = _as_points(a, "a")
    pb = _as_points(b, "b")
    diffs = pa[:, None, :] - pb[None, :, :]
    d2 = (diffs * diffs).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1)).max())


def hausdorff(a, b):
    """Symmetric Hausdorff distance between two polylines (mm)."""
    return max(directed_hausdorff(a, b), directed_hausdorff(b, a))


@dataclass(frozen=True)
class DistanceReport:
    """Per-pair distances with a nearest-rank percentile summary."""

    pair_distances: np.ndarray
    percentiles: dict
    count_below_1mm: int


def percentile_report(distances, ranks=DEFAULT_RANKS):
    """Nearest-rank percentile summary of a distance vector."""
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 1 or len(d) == 0:
        raise InvalidInputError("distances must be a non-empty vector")
    if not np.all(np.isfinite(d)):
        raise InvalidInputError("distances contain non-finite values")
    srt = np.sort(d)
    n = len(srt)
    percentiles = {}
    for p in ranks:
        idx = max(1, math.ceil(p / 100.0 * n))
        percentiles[p] = float(srt[idx - 1])
    return DistanceReport(
        pair_distances=d,
        percentiles=percentiles,
        count_below_1mm=int((d < 1.0).sum()),
    )
