"""Shared array layer for the numeric kernels.

Every hot kernel (basis evaluation, Newton iterations, interpolation,
position updates) is written once against the helpers below and runs in two
worlds:

* plain mode: float64 ndarrays, with transcendentals applied per element
  through :mod:`math` so results match the taped world bit for bit
  (vectorized libm variants are not guaranteed to round identically);
* taped mode: :class:`TapeArray`, an object ndarray of
  :class:`~difftrack.autodiff.DiffValue`, recording every scalar operation.

Reductions go through :func:`tree_sum`, a fixed pairwise order implemented
identically in both worlds.  Comparisons return plain boolean masks (they
are gradient-stopping by construction) and :func:`select` multiplexes
per element without arithmetic, so frozen lanes keep their exact bits.
"""

import math
import operator

import numpy as np

from .autodiff import CONSTANT, DiffValue, atan2 as _dv_atan2

_obj_add = np.frompyfunc(operator.add, 2, 1)
_obj_sub = np.frompyfunc(operator.sub, 2, 1)
_obj_mul = np.frompyfunc(operator.mul, 2, 1)
_obj_div = np.frompyfunc(operator.truediv, 2, 1)
_obj_neg = np.frompyfunc(operator.neg, 1, 1)
_obj_value = np.frompyfunc(
    lambda v: v.value if isinstance(v, DiffValue) else float(v), 1, 1
)
_obj_sin = np.frompyfunc(lambda v: v.sin() if isinstance(v, DiffValue) else math.sin(v), 1, 1)
_obj_cos = np.frompyfunc(lambda v: v.cos() if isinstance(v, DiffValue) else math.cos(v), 1, 1)
_obj_sqrt = np.frompyfunc(
    lambda v: v.sqrt() if isinstance(v, DiffValue) else math.sqrt(v), 1, 1
)
_obj_abs = np.frompyfunc(lambda v: v.abs() if isinstance(v, DiffValue) else abs(v), 1, 1)

_ACOS_GUARD = 1.0 - 1e-12


def _acos_plain(x):
    if x > _ACOS_GUARD:
        x = _ACOS_GUARD
    elif x < -_ACOS_GUARD:
        x = -_ACOS_GUARD
    return math.acos(x)


_obj_acos = np.frompyfunc(
    lambda v: v.acos() if isinstance(v, DiffValue) else _acos_plain(v), 1, 1
)
_obj_atan2 = np.frompyfunc(_dv_atan2, 2, 1)
_obj_where = np.frompyfunc(lambda c, a, b: a if c else b, 3, 1)


class TapeArray:
    """Batch of DiffValues behaving like a 1-D numeric array."""

    __slots__ = ("data",)
    __array_ufunc__ = None

    def __init__(self, data):
        self.data = data

    @classmethod
    def from_values(cls, values):
        a = np.empty(len(values), dtype=object)
        for i, v in enumerate(values):
            a[i] = v
        return cls(a)

    @classmethod
    def constants(cls, values):
        return cls.from_values([DiffValue(None, float(v), CONSTANT) for v in values])

    def __len__(self):
        return len(self.data)

    def _coerce(self, other):
        return other.data if isinstance(other, TapeArray) else other

    def __add__(self, other):
        return TapeArray(_obj_add(self.data, self._coerce(other)))

    def __radd__(self, other):
        return TapeArray(_obj_add(self._coerce(other), self.data))

    def __sub__(self, other):
        return TapeArray(_obj_sub(self.data, self._coerce(other)))

    def __rsub__(self, other):
        return TapeArray(_obj_sub(self._coerce(other), self.data))

    def __mul__(self, other):
        return TapeArray(_obj_mul(self.data, self._coerce(other)))

    def __rmul__(self, other):
        return TapeArray(_obj_mul(self._coerce(other), self.data))

    def __truediv__(self, other):
        return TapeArray(_obj_div(self.data, self._coerce(other)))

    def __rtruediv__(self, other):
        return TapeArray(_obj_div(self._coerce(other), self.data))

    def __neg__(self):
        return TapeArray(_obj_neg(self.data))

    def __getitem__(self, idx):
        got = self.data[idx]
        if isinstance(got, np.ndarray):
            return TapeArray(got)
        return got


def is_taped(x):
    return isinstance(x, TapeArray)


def values(x):
    """Numeric float64 view of ``x`` (plain arrays pass through)."""
    if isinstance(x, TapeArray):
        return _obj_value(x.data).astype(np.float64)
    if isinstance(x, DiffValue):
        return x.value
    if np.iscomplexobj(x):
        return np.asarray(x).real
    return x


# Complex inputs run in dual-number (complex-step) mode: the imaginary part
# carries an infinitesimal perturbation and every primitive propagates it to
# first order.  This exists for the finite-difference test harness only; the
# product surfaces always run real arithmetic.


def _map1(fn, x):
    if np.iscomplexobj(x):
        return _COMPLEX_MAP1[fn](np.asarray(x))
    a = np.asarray(x, dtype=np.float64)
    out = np.fromiter(map(fn, a.ravel()), dtype=np.float64, count=a.size)
    return out.reshape(a.shape)


def _map2(fn, y, x):
    if np.iscomplexobj(y) or np.iscomplexobj(x):
        return _COMPLEX_MAP2[fn](np.asarray(y, dtype=complex), np.asarray(x, dtype=complex))
    ya = np.asarray(y, dtype=np.float64)
    xa = np.asarray(x, dtype=np.float64)
    ya, xa = np.broadcast_arrays(ya, xa)
    out = np.fromiter(map(fn, ya.ravel(), xa.ravel()), dtype=np.float64, count=ya.size)
    return out.reshape(ya.shape)


def _csin(z):
    return np.array([math.sin(v.real) + 1j * math.cos(v.real) * v.imag for v in z.ravel()]).reshape(z.shape)


def _ccos(z):
    return np.array([math.cos(v.real) - 1j * math.sin(v.real) * v.imag for v in z.ravel()]).reshape(z.shape)


def _csqrt(z):
    out = []
    for v in z.ravel():
        r = math.sqrt(v.real)
        out.append(r + 1j * (0.5 / r if r > 0 else 0.0) * v.imag)
    return np.array(out).reshape(z.shape)


def _cacos(z):
    out = []
    for v in z.ravel():
        x = v.real
        xc = _ACOS_GUARD if x > _ACOS_GUARD else (-_ACOS_GUARD if x < -_ACOS_GUARD else x)
        d = -1.0 / math.sqrt(1.0 - xc * xc) if -_ACOS_GUARD < x < _ACOS_GUARD else 0.0
        out.append(math.acos(xc) + 1j * d * v.imag)
    return np.array(out).reshape(z.shape)


def _catan2(y, x):
    y, x = np.broadcast_arrays(y, x)
    out = []
    for yv, xv in zip(y.ravel(), x.ravel()):
        r2 = yv.real * yv.real + xv.real * xv.real
        if r2 < 1e-300:
            dy = dx = 0.0
        else:
            dy = xv.real / r2
            dx = -yv.real / r2
        out.append(math.atan2(yv.real, xv.real) + 1j * (dy * yv.imag + dx * xv.imag))
    return np.array(out).reshape(y.shape)


_COMPLEX_MAP1 = {math.sin: _csin, math.cos: _ccos, math.sqrt: _csqrt}
_COMPLEX_MAP2 = {math.atan2: _catan2}


def vsin(x):
    if isinstance(x, TapeArray):
        return TapeArray(_obj_sin(x.data))
    return _map1(math.sin, x)


def vcos(x):
    if isinstance(x, TapeArray):
        return TapeArray(_obj_cos(x.data))
    return _map1(math.cos, x)


def vsqrt(x):
    if isinstance(x, TapeArray):
        return TapeArray(_obj_sqrt(x.data))
    return _map1(math.sqrt, x)


def vabs(x):
    if isinstance(x, TapeArray):
        return TapeArray(_obj_abs(x.data))
    if np.iscomplexobj(x):
        a = np.asarray(x)
        return np.where(a.real >= 0, a, -a)
    return np.abs(np.asarray(x, dtype=np.float64))


def vacos(x):
    """Arc cosine with the domain guard applied in both worlds."""
    if isinstance(x, TapeArray):
        return TapeArray(_obj_acos(x.data))
    if np.iscomplexobj(x):
        return _cacos(np.asarray(x))
    return _map1(_acos_plain, x)


def vatan2(y, x):
    if isinstance(y, TapeArray) or isinstance(x, TapeArray):
        yd = y.data if isinstance(y, TapeArray) else y
        xd = x.data if isinstance(x, TapeArray) else x
        return TapeArray(_obj_atan2(yd, xd))
    return _map2(math.atan2, y, x)


def vclamp(x, lo=None, hi=None):
    if isinstance(x, TapeArray):
        return TapeArray(
            np.frompyfunc(
                lambda v: v.clamp(lo, hi)
                if isinstance(v, DiffValue)
                else _clamp_plain(v, lo, hi),
                1,
                1,
            )(x.data)
        )
    if np.iscomplexobj(x):
        a = np.asarray(x).copy()
        if lo is not None:
            a[a.real < lo] = lo
        if hi is not None:
            a[a.real > hi] = hi
        return a
    a = np.asarray(x, dtype=np.float64)
    if lo is not None:
        a = np.maximum(a, lo)
    if hi is not None:
        a = np.minimum(a, hi)
    return a


def _clamp_plain(v, lo, hi):
    if lo is not None and v < lo:
        return lo
    if hi is not None and v > hi:
        return hi
    return v


def select(cond, a, b):
    """Per-element multiplexer driven by a plain boolean mask.

    Selection (not mask arithmetic) keeps unchosen lanes bit-identical and
    routes gradients only through the chosen branch.
    """
    if isinstance(a, TapeArray) or isinstance(b, TapeArray):
        ad = a.data if isinstance(a, TapeArray) else a
        bd = b.data if isinstance(b, TapeArray) else b
        return TapeArray(_obj_where(cond, ad, bd))
    return np.where(cond, a, b)


def tree_sum(items):
    """Pairwise reduction of a list with a fixed association order.

    Works element-wise on plain arrays, TapeArrays, DiffValues and floats;
    both worlds produce bit-identical sums because the pairing is the same.
    """
    items = list(items)
    if not items:
        return 0.0
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]

