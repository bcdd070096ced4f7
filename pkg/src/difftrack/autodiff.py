"""Reverse-mode automatic differentiation over scalar operations.

A :class:`Tape` is an append-only Wengert list.  Every recorded node stores
the indices of its parents and the local partial derivatives at the point of
evaluation, so a single reverse sweep (:func:`backward`) accumulates the
adjoint of one output into every registered input.

:class:`DiffValue` is the differentiable scalar the numeric kernels are
written against.  Values carrying ``node == CONSTANT`` never receive
adjoints; plain Python floats mix freely with DiffValues and behave as
constants.  Comparisons are deliberately not overloaded: branch decisions
must be taken on ``.value`` (or via :func:`stop_gradient`) so control flow
never enters the recorded graph.
"""

import math

import numpy as np

from .errors import NoGradientError, TapePoisonedError

CONSTANT = -1

# Guards keeping local partials finite (tape invariant: partials are finite
# even at non-differentiable points; the subgradient 0 is used there).
_ACOS_GUARD = 1.0 - 1e-12
_TINY = 1e-300


def _check(tape, value):
    if not math.isfinite(value):
        raise TapePoisonedError(
            f"non-finite value {value!r} at tape node {len(tape.values)}",
            node=len(tape.values),
        )
    return value


class Tape:
    """Append-only record of scalar operations.

    ``values[i]``, ``parents[i]`` and ``partials[i]`` describe node ``i``;
    parents always have indices ``< i``.  ``inputs`` maps a user key, for
    volume coefficients ``((i, j, k), coeff_index)``, to the leaf node that
    represents it.  ``outputs`` is a convenience registry letting callers
    tag interesting values (e.g. streamline coordinates) for later lookup.
    """

    def __init__(self):
        self.values = []
        self.parents = []
        self.partials = []
        self.inputs = {}
        self.outputs = {}

    def __len__(self):
        return len(self.values)

    def _node(self, value, parents, partials):
        _check(self, value)
        nid = len(self.values)
        self.values.append(value)
        self.parents.append(parents)
        self.partials.append(partials)
        return nid

    def constant(self, value):
        """Wrap ``value`` as a constant (never differentiated)."""
        return DiffValue(None, float(value), CONSTANT)

    def input(self, key, value):
        """Register (or fetch) the leaf node for input ``key``."""
        nid = self.inputs.get(key)
        if nid is None:
            nid = self._node(float(value), (), ())
            self.inputs[key] = nid
        return DiffValue(self, self.values[nid], nid)

    def lift(self, value):
        """Promote a plain number to a live tape value (identity node)."""
        nid = self._node(float(value), (), ())
        return DiffValue(self, value, nid)

    def note_output(self, key, dv):
        self.outputs[key] = dv

    def output(self, key):
        return self.outputs[key]

    # Generic primitive dispatcher.  The operator methods on
    # DiffValue are the hot path; this is the generic surface.
    def record(self, op, *args):
        fn = _RECORD_OPS.get(op)
        if fn is None:
            raise KeyError(f"unknown primitive {op!r}")
        return fn(self, *args)


class DiffValue:
    """A scalar with a position on a tape (or CONSTANT)."""

    __slots__ = ("tape", "value", "node")
    # Keep numpy from absorbing DiffValues into object arrays during
    # arithmetic; reflected operators must win.
    __array_ufunc__ = None

    def __init__(self, tape, value, node):
        self.tape = tape
        self.value = value
        self.node = node

    def __repr__(self):
        tag = "const" if self.node == CONSTANT else f"node {self.node}"
        return f"DiffValue({self.value!r}, {tag})"

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, DiffValue):
            v = self.value + other.value
            if self.node == CONSTANT and other.node == CONSTANT:
                return DiffValue(None, v, CONSTANT)
            if self.node == CONSTANT:
                t = other.tape
                return DiffValue(t, v, t._node(v, (other.node,), (1.0,)))
            if other.node == CONSTANT:
                t = self.tape
                return DiffValue(t, v, t._node(v, (self.node,), (1.0,)))
            t = self.tape
            return DiffValue(t, v, t._node(v, (self.node, other.node), (1.0, 1.0)))
        v = self.value + other
        if self.node == CONSTANT:
            return DiffValue(None, v, CONSTANT)
        t = self.tape
        return DiffValue(t, v, t._node(v, (self.node,), (1.0,)))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, DiffValue):
            v = self.value - other.value
            if self.node == CONSTANT and other.node == CONSTANT:
                return DiffValue(None, v, CONSTANT)
            if self.node == CONSTANT:
                t = other.tape
                return DiffValue(t, v, t._node(v, (other.node,), (-1.0,)))
            if other.node == CONSTANT:
                t = self.tape
                return DiffValue(t, v, t._node(v, (self.node,), (1.0,)))
            t = self.tape
            return DiffValue(t, v, t._node(v, (self.node, other.node), (1.0, -1.0)))
        v = self.value - other
        if self.node == CONSTANT:
            return DiffValue(None, v, CONSTANT)
        t = self.tape
        return DiffValue(t, v, t._node(v, (self.node,), (1.0,)))

    def __rsub__(self, other):
        v = other - self.value
        if self.node == CONSTANT:
            return DiffValue(None, v, CONSTANT)
        t = self.tape
        return DiffValue(t, v, t._node(v, (self.node,), (-1.0,)))

    def __mul__(self, other):
        if isinstance(other, DiffValue):
            v = self.value * other.value
            if self.node == CONSTANT and other.node == CONSTANT:
                return DiffValue(None, v, CONSTANT)
            if self.node == CONSTANT:
                t = other.tape
                return DiffValue(t, v, t._node(v, (other.node,), (self.value,)))
            if other.node == CONSTANT:
                t = self.tape
                return DiffValue(t, v, t._node(v, (self.node,), (other.value,)))
            t = self.tape
            return DiffValue(
                t, v, t._node(v, (self.node, other.node), (other.value, self.value))
            )
        v = self.value * other
        if self.node == CONSTANT:
            return DiffValue(None, v, CONSTANT)
        t = self.tape
        return DiffValue(t, v, t._node(v, (self.node,), (other,)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        try:
            if isinstance(other, DiffValue):
                v = self.value / other.value
                if self.node == CONSTANT and other.node == CONSTANT:
                    return DiffValue(None, v, CONSTANT)
                db = -v / other.value
                if self.node == CONSTANT:
                    t = other.tape
                    return DiffValue(t, v, t._node(v, (other.node,), (db,)))
                da = 1.0 / other.value
                if other.node == CONSTANT:
                    t = self.tape
                    return DiffValue(t, v, t._node(v, (self.node,), (da,)))
                t = self.tape
                return DiffValue(t, v, t._node(v, (self.node, other.node), (da, db)))
            v = self.value / other
            if self.node == CONSTANT:
                return DiffValue(None, v, CONSTANT)
            t = self.tape
            return DiffValue(t, v, t._node(v, (self.node,), (1.0 / other,)))
        except ZeroDivisionError as e:
            tape = self.tape if self.node != CONSTANT else getattr(other, "tape", None)
            raise TapePoisonedError(
                f"division by zero at tape node {len(tape.values) if tape else '?'}",
                node=len(tape.values) if tape else None,
            ) from e

    def __rtruediv__(self, other):
        try:
            v = other / self.value
            if self.node == CONSTANT:
                return DiffValue(None, v, CONSTANT)
            t = self.tape
            return DiffValue(t, v, t._node(v, (self.node,), (-v / self.value,)))
        except ZeroDivisionError as e:
            t = self.tape if self.node != CONSTANT else None
            raise TapePoisonedError(
                f"division by zero at tape node {len(t.values) if t else '?'}",
                node=len(t.values) if t else None,
            ) from e

    def __neg__(self):
        if self.node == CONSTANT:
            return DiffValue(None, -self.value, CONSTANT)
        t = self.tape
        v = -self.value
        return DiffValue(t, v, t._node(v, (self.node,), (-1.0,)))

    # -- unary transcendentals ------------------------------------------

    def sin(self):
        v = math.sin(self.value)
        if self.node == CONSTANT:
            return DiffValue(None, v, CONSTANT)
        t = self.tape
        return DiffValue(t, v, t._node(v, (self.node,), (math.cos(self.value),)))

    def cos(self):
        v = math.cos(self.value)
        if self.node == CONSTANT:
            return DiffValue(None, v, CONSTANT)
        t = self.tape
        return DiffValue(t, v, t._node(v, (self.node,), (-math.sin(self.value),)))

    def sqrt(self):
        v = math.sqrt(self.value)
        if self.node == CONSTANT:
            return DiffValue(None, v, CONSTANT)
        t = self.tape
        d = 0.5 / v if v > 0.0 else 0.0
        return DiffValue(t, v, t._node(v, (self.node,), (d,)))

    def abs(self):
        x = self.value
        v = abs(x)
        if self.node == CONSTANT:
            return DiffValue(None, v, CONSTANT)
        t = self.tape
        d = 1.0 if x > 0.0 else (-1.0 if x < 0.0 else 0.0)
        return DiffValue(t, v, t._node(v, (self.node,), (d,)))

    def acos(self):
        # Inputs are clamped to (-1, 1) so normalized vectors that exceed
        # unity by round-off never produce NaN or infinite partials.
        x = self.value
        xc = _ACOS_GUARD if x > _ACOS_GUARD else (-_ACOS_GUARD if x < -_ACOS_GUARD else x)
        v = math.acos(xc)
        if self.node == CONSTANT:
            return DiffValue(None, v, CONSTANT)
        t = self.tape
        d = -1.0 / math.sqrt(1.0 - xc * xc) if -_ACOS_GUARD < x < _ACOS_GUARD else 0.0
        return DiffValue(t, v, t._node(v, (self.node,), (d,)))

    def clamp(self, lo=None, hi=None):
        x = self.value
        v = x
        saturated = False
        if lo is not None and v < lo:
            v, saturated = lo, True
        if hi is not None and v > hi:
            v, saturated = hi, True
        if lo is not None and x == lo:
            saturated = True
        if hi is not None and x == hi:
            saturated = True
        if self.node == CONSTANT:
            return DiffValue(None, v, CONSTANT)
        t = self.tape
        return DiffValue(t, v, t._node(v, (self.node,), (0.0 if saturated else 1.0,)))


def _atan2(y, x):
    yv = y.value if isinstance(y, DiffValue) else y
    xv = x.value if isinstance(x, DiffValue) else x
    v = math.atan2(yv, xv)
    yn = y.node if isinstance(y, DiffValue) else CONSTANT
    xn = x.node if isinstance(x, DiffValue) else CONSTANT
    if yn == CONSTANT and xn == CONSTANT:
        return DiffValue(None, v, CONSTANT)
    tape = y.tape if yn != CONSTANT else x.tape
    r2 = yv * yv + xv * xv
    if r2 < _TINY:
        dy = dx = 0.0
    else:
        dy = xv / r2
        dx = -yv / r2
    parents, partials = [], []
    if yn != CONSTANT:
        parents.append(yn)
        partials.append(dy)
    if xn != CONSTANT:
        parents.append(xn)
        partials.append(dx)
    return DiffValue(tape, v, tape._node(v, tuple(parents), tuple(partials)))


def atan2(y, x):
    """Differentiable two-argument arctangent; accepts DiffValues or floats."""
    if isinstance(y, DiffValue) or isinstance(x, DiffValue):
        return _atan2(y, x)
    return math.atan2(y, x)


def dot(a, b):
    """Inner product of two equal-length sequences as a single tape node.

    The value is accumulated with the package-wide pairwise tree order so
    taped and plain evaluations agree bitwise.
    """
    if len(a) != len(b):
        raise ValueError("dot: length mismatch")
    prods = []
    tape = None
    for x, y in zip(a, b):
        xv = x.value if isinstance(x, DiffValue) else x
        yv = y.value if isinstance(y, DiffValue) else y
        prods.append(xv * yv)
        if tape is None:
            if isinstance(x, DiffValue) and x.node != CONSTANT:
                tape = x.tape
            elif isinstance(y, DiffValue) and y.node != CONSTANT:
                tape = y.tape
    items = list(prods)
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    v = items[0] if items else 0.0
    if tape is None:
        return v
    parents, partials = [], []
    for x, y in zip(a, b):
        if isinstance(x, DiffValue) and x.node != CONSTANT:
            parents.append(x.node)
            partials.append(y.value if isinstance(y, DiffValue) else y)
        if isinstance(y, DiffValue) and y.node != CONSTANT:
            parents.append(y.node)
            partials.append(x.value if isinstance(x, DiffValue) else x)
    return DiffValue(tape, v, tape._node(v, tuple(parents), tuple(partials)))


def stop_gradient(v):
    """Return a CONSTANT-marked copy of ``v`` (identical numeric value)."""
    if isinstance(v, DiffValue):
        return DiffValue(None, v.value, CONSTANT)
    return v


def value_of(v):
    return v.value if isinstance(v, DiffValue) else v


_RECORD_OPS = {
    "+": lambda t, a, b: a + b,
    "-": lambda t, a, b: a - b,
    "*": lambda t, a, b: a * b,
    "/": lambda t, a, b: a / b,
    "sin": lambda t, a: a.sin(),
    "cos": lambda t, a: a.cos(),
    "sqrt": lambda t, a: a.sqrt(),
    "abs": lambda t, a: a.abs(),
    "acos": lambda t, a: a.acos(),
    "atan2": lambda t, y, x: atan2(y, x),
    "clamp": lambda t, a, lo, hi: a.clamp(lo, hi),
    "dot": lambda t, a, b: dot(a, b),
}


class GradientResult:
    """Sparse gradient of one scalar output.

    ``partials`` maps each registered input key (voxel index triple,
    coefficient index) to d(output)/d(input); only voxels whose stencils
    were touched during the recorded run appear.
    """

    def __init__(self, seed_output, partials):
        self.seed_output = seed_output
        self.partials = partials

    def __repr__(self):
        return (
            f"GradientResult(seed_output={self.seed_output!r}, "
            f"n_partials={len(self.partials)})"
        )


def backward(tape, output, seed_output=None):
    """Reverse sweep from ``output`` accumulating adjoints into inputs."""
    if not isinstance(output, DiffValue) or output.node == CONSTANT:
        raise NoGradientError("output is a constant; nothing to differentiate")
    if output.tape is not tape:
        raise NoGradientError("output does not belong to this tape")
    n = output.node
    adjoint = np.zeros(n + 1)
    adjoint[n] = 1.0
    parents = tape.parents
    partials = tape.partials
    for i in range(n, -1, -1):
        a = adjoint[i]
        if a == 0.0:
            continue
        ps = parents[i]
        if not ps:
            continue
        qs = partials[i]
        for j in range(len(ps)):
            adjoint[ps[j]] += a * qs[j]
    grads = {}
    for key, nid in tape.inputs.items():
        if nid <= n and adjoint[nid] != 0.0:
            grads[key] = float(adjoint[nid])
    return GradientResult(seed_output, grads)
