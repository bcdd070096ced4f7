"""Real even-order spherical-harmonic basis and its angular derivatives.

Convention: even degrees only, with the flat coefficient index
``k = l(l+1)/2 + m`` (the storage order used by MRtrix-style CSD tools), and

* ``m > 0``  ->  sqrt(2) * cos(m * az) * Plm_bar(cos el)
* ``m = 0``  ->  Pl0_bar(cos el)
* ``m < 0``  ->  sqrt(2) * sin(|m| * az) * Pl|m|_bar(cos el)

where ``Plm_bar`` are the orthonormalized associated Legendre functions
(Condon-Shortley phase included).  Legendre values are produced by a stable
three-term recurrence in cos(el); the per-(l, m) normalization constants are
precomputed once per band limit and cached.  First and second derivatives
with respect to elevation follow from differentiating the same recurrences,
so they are available in both the plain and the taped execution worlds.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import engine as eg
from .errors import (
    DimensionMismatchError,
    InvalidDirectionError,
    InvalidParameterError,
)

LMAX_LIMIT = 16
SQRT2 = math.sqrt(2.0)
_Y00 = 0.5 / math.sqrt(math.pi)


def num_coefficients(lmax):
    """Number of even-order real SH coefficients for band limit ``lmax``."""
    if not isinstance(lmax, (int, np.integer)):
        raise InvalidParameterError(f"lmax must be an integer, got {lmax!r}")
    if lmax < 0 or lmax % 2 != 0:
        raise InvalidParameterError(f"lmax must be even and non-negative, got {lmax}")
    if lmax > LMAX_LIMIT:
        raise InvalidParameterError(f"lmax {lmax} exceeds supported limit {LMAX_LIMIT}")
    return (lmax // 2 + 1) * (lmax + 1)


@dataclass(frozen=True)
class SphericalAngles:
    """Elevation (polar, [0, pi]) and azimuth ((-pi, pi]) in radians."""

    el: float
    az: float

    def __post_init__(self):
        if not (math.isfinite(self.el) and math.isfinite(self.az)):
            raise InvalidParameterError("angles must be finite")
        if not (0.0 <= self.el <= math.pi):
            raise InvalidParameterError(f"elevation {self.el} outside [0, pi]")


@dataclass(frozen=True)
class ShCoefficients:
    """One even-order real SH coefficient vector."""

    values: np.ndarray
    lmax: int

    def __post_init__(self):
        vals = np.asarray(self.values)
        object.__setattr__(self, "values", vals)
        k = num_coefficients(self.lmax)
        if vals.shape != (k,):
            raise DimensionMismatchError(
                f"expected {k} coefficients for lmax={self.lmax}, got shape {vals.shape}"
            )
        if vals.dtype != object and not np.all(np.isfinite(vals)):
            raise InvalidParameterError("coefficients must be finite")


@dataclass(frozen=True)
class BasisDerivatives:
    """Basis values plus first/second partials w.r.t. elevation and azimuth."""

    value: np.ndarray
    d_el: np.ndarray
    d_az: np.ndarray
    d2_el: np.ndarray
    d2_az: np.ndarray
    d_el_az: np.ndarray


# Instruction kinds for the Legendre recurrence plan.
_ROOT, _DIAG, _SUB, _REC = 0, 1, 2, 3


@lru_cache(maxsize=None)
def basis_plan(lmax):
    """Precomputed recurrence constants and assembly table for ``lmax``."""
    num_coefficients(lmax)  # validates
    index = {}
    instr = []
    for m in range(lmax + 1):
        for l in range(m, lmax + 1):
            i = len(instr)
            index[(l, m)] = i
            if l == 0:
                instr.append((_ROOT, 0, 0, 0.0, 0.0))
            elif l == m:
                km = -math.sqrt((2.0 * m + 1.0) / (2.0 * m))
                instr.append((_DIAG, index[(m - 1, m - 1)], 0, km, 0.0))
            elif l == m + 1:
                cm = math.sqrt(2.0 * m + 3.0)
                instr.append((_SUB, index[(m, m)], 0, cm, 0.0))
            else:
                a = math.sqrt((4.0 * l * l - 1.0) / ((l - m) * (l + m)))
                b = math.sqrt(
                    (2.0 * l + 1.0)
                    * (l - 1.0 + m)
                    * (l - 1.0 - m)
                    / ((2.0 * l - 3.0) * (l - m) * (l + m))
                )
                instr.append((_REC, index[(l - 1, m)], index[(l - 2, m)], a, b))
    # flat index k = l(l+1)/2 + m over even degrees
    terms = []
    for l in range(0, lmax + 1, 2):
        for m in range(-l, l + 1):
            terms.append((l * (l + 1) // 2 + m, index[(l, abs(m))], m))
    terms.sort()
    return instr, terms


#: total number of single-direction basis evaluations performed so far,
#: incremented by the batch size on every eval_stack call (test instrumentation)
eval_count = 0


def eval_stack(plan, cos_el, sin_el, cos_az, sin_az, lmax, want_derivs=True):
    """Evaluate the per-coefficient basis stack for a batch of angles.

    Returns six length-K lists of batch values: Y, dY/del, dY/daz,
    d2Y/del2, d2Y/daz2, d2Y/deldaz (the last five are None entries when
    ``want_derivs`` is false).  Entries that are identically zero
    (azimuthal derivatives of m = 0 terms) are the float 0.0.  Inputs may
    be plain arrays or TapeArrays; the arithmetic is identical either way.
    """
    global eval_count
    try:
        eval_count += len(eg.values(cos_el))
    except TypeError:
        eval_count += 1
    instr, terms = plan
    n = len(instr)
    p = [None] * n
    dp = [None] * n
    d2p = [None] * n
    for i, (kind, j1, j2, a, b) in enumerate(instr):
        if kind == _ROOT:
            p[i] = _Y00
            if want_derivs:
                dp[i] = 0.0
                d2p[i] = 0.0
        elif kind == _DIAG:
            p[i] = a * (sin_el * p[j1])
            if want_derivs:
                dp[i] = a * (cos_el * p[j1] + sin_el * dp[j1])
                d2p[i] = a * (
                    2.0 * (cos_el * dp[j1]) - sin_el * p[j1] + sin_el * d2p[j1]
                )
        elif kind == _SUB:
            p[i] = a * (cos_el * p[j1])
            if want_derivs:
                dp[i] = a * (cos_el * dp[j1] - sin_el * p[j1])
                d2p[i] = a * (
                    cos_el * d2p[j1] - 2.0 * (sin_el * dp[j1]) - cos_el * p[j1]
                )
        else:
            p[i] = a * (cos_el * p[j1]) - b * p[j2]
            if want_derivs:
                dp[i] = a * (cos_el * dp[j1] - sin_el * p[j1]) - b * dp[j2]
                d2p[i] = (
                    a * (cos_el * d2p[j1] - 2.0 * (sin_el * dp[j1]) - cos_el * p[j1])
                    - b * d2p[j2]
                )
    # cos(m az), sin(m az) by angle addition (exact arithmetic only)
    cm = [1.0]
    sm = [0.0]
    for _ in range(lmax):
        c_prev, s_prev = cm[-1], sm[-1]
        cm.append(c_prev * cos_az - s_prev * sin_az)
        sm.append(s_prev * cos_az + c_prev * sin_az)

    K = len(terms)
    y = [None] * K
    yel = [None] * K
    yaz = [None] * K
    yel2 = [None] * K
    yaz2 = [None] * K
    yelaz = [None] * K
    for k, pi, m in terms:
        if m == 0:
            y[k] = p[pi]
            if want_derivs:
                yel[k] = dp[pi]
                yel2[k] = d2p[pi]
                yaz[k] = 0.0
                yaz2[k] = 0.0
                yelaz[k] = 0.0
        elif m > 0:
            f = SQRT2 * cm[m]
            y[k] = f * p[pi]
            if want_derivs:
                g = SQRT2 * sm[m]
                yel[k] = f * dp[pi]
                yel2[k] = f * d2p[pi]
                yaz[k] = (-float(m)) * (g * p[pi])
                yaz2[k] = (-float(m * m)) * y[k]
                yelaz[k] = (-float(m)) * (g * dp[pi])
        else:
            mu = -m
            f = SQRT2 * sm[mu]
            y[k] = f * p[pi]
            if want_derivs:
                g = SQRT2 * cm[mu]
                yel[k] = f * dp[pi]
                yel2[k] = f * d2p[pi]
                yaz[k] = float(mu) * (g * p[pi])
                yaz2[k] = (-float(mu * mu)) * y[k]
                yelaz[k] = float(mu) * (g * dp[pi])
    return y, yel, yaz, yel2, yaz2, yelaz


def contract(coeff_cols, basis_cols):
    """Batch dot product sum_k c_k * Y_k with the fixed pairwise order."""
    return eg.tree_sum([coeff_cols[k] * basis_cols[k] for k in range(len(basis_cols))])


def _as_batch_columns(stack, n):
    out = []
    for col in stack:
        if isinstance(col, float):
            out.append(np.full(n, col))
        else:
            out.append(np.asarray(col, dtype=np.float64))
    return out


def cartesian_to_angles(direction):
    """Spherical angles of a unit 3-vector: el = acos(z), az = atan2(y, x)."""
    d = np.asarray(direction, dtype=np.float64)
    if d.shape != (3,) or not np.all(np.isfinite(d)):
        raise InvalidDirectionError(f"direction must be a finite 3-vector, got {direction!r}")
    norm = math.sqrt(float(d[0]) ** 2 + float(d[1]) ** 2 + float(d[2]) ** 2)
    if abs(norm - 1.0) > 1e-6:
        raise InvalidDirectionError(f"direction norm {norm} is not 1 within 1e-6")
    z = min(1.0, max(-1.0, float(d[2])))
    return SphericalAngles(el=math.acos(z), az=math.atan2(float(d[1]), float(d[0])))


def eval_basis(angles, lmax):
    """Basis values at ``angles`` in flat-k order; shape (K,)."""
    plan = basis_plan(lmax)
    el = np.array([angles.el])
    az = np.array([angles.az])
    stack = eval_stack(
        plan, _map_cos(el), _map_sin(el), _map_cos(az), _map_sin(az), lmax
    )
    cols = _as_batch_columns(stack[0], 1)
    return np.array([c[0] for c in cols])


def eval_basis_derivatives(angles, lmax):
    """Basis values plus all first/second angular partials at ``angles``."""
    plan = basis_plan(lmax)
    el = np.array([angles.el])
    az = np.array([angles.az])
    stack = eval_stack(
        plan, _map_cos(el), _map_sin(el), _map_cos(az), _map_sin(az), lmax
    )
    fields = []
    for part in stack:
        cols = _as_batch_columns(part, 1)
        fields.append(np.array([c[0] for c in cols]))
    return BasisDerivatives(
        value=fields[0],
        d_el=fields[1],
        d_az=fields[2],
        d2_el=fields[3],
        d2_az=fields[4],
        d_el_az=fields[5],
    )


def amplitude(coeffs, direction):
    """FOD amplitude along ``direction``: dot(basis(angles), coeffs)."""
    if not isinstance(coeffs, ShCoefficients):
        raise InvalidParameterError("coeffs must be ShCoefficients")
    k = num_coefficients(coeffs.lmax)
    if len(coeffs.values) != k:
        raise DimensionMismatchError(
            f"coefficient length {len(coeffs.values)} != {k} for lmax={coeffs.lmax}"
        )
    basis = eval_basis(cartesian_to_angles(direction), coeffs.lmax)
    vals = coeffs.values
    if vals.dtype == object:
        return eg.tree_sum([vals[i] * basis[i] for i in range(k)])
    return float(eg.tree_sum([float(vals[i]) * basis[i] for i in range(k)]))


def _map_sin(a):
    return eg.vsin(a)


def _map_cos(a):
    return eg.vcos(a)
