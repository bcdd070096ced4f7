"""Finite-difference verification of streamline gradients.

One taped propagation produces the analytic partials of a chosen streamline
coordinate with respect to every touched voxel coefficient.  Each nonzero
partial is then compared against a central finite difference: the +h and -h
reruns for all coefficients are batched through the plain propagator as one
call, using per-element coefficient offsets (numerically equivalent to
perturbing the volume, without materializing hundreds of copies).

The gradient is defined at a fixed decision pattern (termination reason,
valid length, and per-step Newton freeze history).  A perturbation that
flips any of those decisions makes the finite difference meaningless at
that coefficient, so such coefficients are excluded and reported.
"""

import time
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, backward
from .errors import InvalidParameterError
from .propagate import SeedBatch, _PropagationTrace, _propagate_core

REL_ERR_FLOOR = 1e-8
# partials far below the dominant one are compared against the gradient
# scale instead of their own magnitude
FLOOR_SCALE = 1e-6
# the central difference cannot resolve anything finer than
# ulp(coordinate) / (2h); allow this many quanta of accumulated round-off
FD_NOISE_QUANTA = 100.0
RTOL = 1e-4


@dataclass(frozen=True)
class GradcheckRow:
    voxel: tuple
    coeff: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass(frozen=True)
class GradcheckReport:
    rows: tuple
    excluded: tuple
    max_rel_err: float
    valid_length: int
    termination: object
    tape_nodes: int
    wall_time: float


def _pattern(batch, trace, element):
    return (
        batch.termination_reasons[element],
        int(batch.valid_lengths[element]),
        trace.pattern_for(element),
    )


def rel_err(a, n, floor=REL_ERR_FLOOR):
    return abs(a - n) / max(abs(a), abs(n), floor)


def run_gradcheck(
    volume, mask, seed, direction, coordinate, params, constants, fd_step=1e-4
):
    """Check d(points[0, t, axis]) / d(coefficients) against central FD."""
    t_idx, axis = coordinate
    if not (0 <= axis <= 2):
        raise InvalidParameterError(f"axis must be 0..2, got {axis}")
    if not (0 <= t_idx < params.max_points):
        raise InvalidParameterError(
            f"step index {t_idx} outside [0, {params.max_points})"
        )
    started = time.perf_counter()
    seeds = SeedBatch(
        positions=np.asarray(seed, dtype=np.float64)[None, :],
        directions=np.asarray(direction, dtype=np.float64)[None, :],
        accepted=np.array([True]),
    )
    tape = Tape()
    base_trace = _PropagationTrace()
    base_batch, _ = _propagate_core(
        volume, mask, seeds, params, constants, tape=tape, trace=base_trace
    )
    if t_idx >= int(base_batch.valid_lengths[0]):
        raise InvalidParameterError(
            f"step index {t_idx} beyond the streamline's valid length "
            f"{int(base_batch.valid_lengths[0])}"
        )
    output = tape.output((0, t_idx, axis))
    grad = backward(tape, output, seed_output=(0, t_idx, axis))
    base_pattern = _pattern(base_batch, base_trace, 0)

    keys = [k for k, v in grad.partials.items() if v != 0.0]
    n_keys = len(keys)
    rows = []
    excluded = []
    max_err = 0.0
    gmax = max((abs(grad.partials[k]) for k in keys), default=0.0)
    base_coord = abs(float(base_batch.points[0, t_idx, axis]))
    fd_resolution = (
        FD_NOISE_QUANTA * np.finfo(float).eps * max(1.0, base_coord) / (2.0 * fd_step)
    )
    floor = max(REL_ERR_FLOOR, FLOOR_SCALE * gmax, fd_resolution / RTOL)
    if n_keys:
        b = 2 * n_keys
        fd_seeds = SeedBatch(
            positions=np.repeat(seeds.positions, b, axis=0),
            directions=np.repeat(seeds.directions, b, axis=0),
            accepted=np.ones(b, dtype=bool),
        )
        offsets = []
        for (vox, coeff) in keys:
            offsets.append((vox[0], vox[1], vox[2], coeff, +fd_step))
            offsets.append((vox[0], vox[1], vox[2], coeff, -fd_step))
        fd_trace = _PropagationTrace()
        fd_batch, _ = _propagate_core(
            volume,
            mask,
            fd_seeds,
            params,
            constants,
            coeff_offsets=offsets,
            trace=fd_trace,
        )
        for idx, key in enumerate(keys):
            plus, minus = 2 * idx, 2 * idx + 1
            pat_p = _pattern(fd_batch, fd_trace, plus)
            pat_m = _pattern(fd_batch, fd_trace, minus)
            if pat_p != base_pattern or pat_m != base_pattern:
                excluded.append(key)
                continue
            fp = fd_batch.points[plus, t_idx, axis]
            fm = fd_batch.points[minus, t_idx, axis]
            numeric = (fp - fm) / (2.0 * fd_step)
            analytic = grad.partials[key]
            err = rel_err(analytic, numeric, floor)
            max_err = max(max_err, err)
            rows.append(
                GradcheckRow(
                    voxel=key[0],
                    coeff=key[1],
                    analytic=analytic,
                    numeric=float(numeric),
                    rel_err=err,
                )
            )
    return GradcheckReport(
        rows=tuple(rows),
        excluded=tuple(excluded),
        max_rel_err=max_err,
        valid_length=int(base_batch.valid_lengths[0]),
        termination=base_batch.termination_reasons[0],
        tape_nodes=len(tape),
        wall_time=time.perf_counter() - started,
    )
