"""Batched deterministic streamline propagation.

The tracking loop never exits early: every batch element runs to the point
cap, with an active mask freezing terminated elements so the output tensor
is shape-stable and zero-padded.  Per iteration t, in order:

1. deactivate if x_t left the image domain          (exit_image)
2. deactivate if the amplitude fell below threshold (model)
3. deactivate on a sharp turn between d_{t-1}, d_t  (high_curvature)
4. advance x_{t+1} = x_t + step * d_t
5. refine d_{t+1}, A_{t+1} at x_{t+1}, warm-started from d_t
6. deactivate if x_{t+1} left the ROI mask          (exit_mask)
7. write x_{t+1} for still-active elements

Elements alive after the last iteration terminate with length_exceed.  A
rejected seed keeps its batch slot (seed point stored, valid length 1) so
outputs stay aligned with inputs.  When a tape is attached the whole loop,
including the seed-direction refinement, is recorded; termination masks are
taken on values only, so they never enter the gradient.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import engine as eg
from .errors import (
    InvalidDirectionError,
    InvalidInputError,
    InvalidParameterError,
)
from .peaks import run_newton
from .volume import (
    check_grid_compatible,
    in_bounds_batch,
    mask_contains_batch,
    world_to_voxel_batch,
)


class TerminationReason(Enum):
    EXIT_IMAGE = "exit_image"
    MODEL = "model"
    HIGH_CURVATURE = "high_curvature"
    EXIT_MASK = "exit_mask"
    LENGTH_EXCEED = "length_exceed"
    SEED_REJECTED = "seed_rejected"


@dataclass(frozen=True)
class TrackingParams:
    """Step size, thresholds, and length limits for one tracking run."""

    step_size: float = 1.0
    amplitude_threshold: float = 0.1
    angle_threshold: float = math.radians(45.0)
    max_points: int = 101
    min_length: float = 0.0
    max_length: float = 100.0
    bidirectional: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if not (self.step_size > 0.0 and math.isfinite(self.step_size)):
            raise InvalidParameterError(f"step_size must be positive, got {self.step_size}")
        if self.max_points < 2:
            raise InvalidParameterError(f"max_points must be >= 2, got {self.max_points}")
        if not (0.0 <= self.min_length <= self.max_length):
            raise InvalidParameterError(
                f"need 0 <= min_length <= max_length, got {self.min_length}, {self.max_length}"
            )
        if not (0.0 < self.angle_threshold < math.pi):
            raise InvalidParameterError(
                f"angle_threshold must be in (0, pi), got {self.angle_threshold}"
            )


@dataclass(frozen=True)
class SeedBatch:
    """Seed positions and (possibly refined) initial directions."""

    positions: np.ndarray
    directions: np.ndarray
    accepted: np.ndarray
    reject_reasons: tuple = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        dirs = np.asarray(self.directions, dtype=np.float64)
        acc = np.asarray(self.accepted, dtype=bool)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape != dirs.shape:
            raise InvalidParameterError("positions/directions must both be (N, 3)")
        if acc.shape != (len(pos),):
            raise InvalidParameterError("accepted must be (N,)")
        if not np.all(np.isfinite(pos)):
            raise InvalidParameterError("seed positions must be finite")
        norms = np.sqrt((dirs * dirs).sum(axis=1))
        if not np.all(np.isfinite(dirs)) or np.any(np.abs(norms - 1.0) > 1e-6):
            raise InvalidDirectionError("seed directions must be unit length within 1e-6")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "directions", dirs)
        object.__setattr__(self, "accepted", acc)
        if self.reject_reasons is None:
            object.__setattr__(
                self,
                "reject_reasons",
                tuple(
                    None if a else TerminationReason.SEED_REJECTED for a in acc
                ),
            )
        else:
            object.__setattr__(self, "reject_reasons", tuple(self.reject_reasons))

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True)
class StreamlineBatch:
    """Zero-padded coordinate tensor plus per-streamline bookkeeping."""

    points: np.ndarray
    valid_lengths: np.ndarray
    termination_reasons: tuple

    def termination_counts(self):
        counts = {reason: 0 for reason in TerminationReason}
        for r in self.termination_reasons:
            counts[r] += 1
        return counts


def sample_seeds(mask, n, rng_seed):
    """Uniform positions inside the set voxels of ``mask`` (world mm)."""
    set_voxels = np.argwhere(mask.values)
    if len(set_voxels) == 0:
        raise InvalidInputError("seed mask has no set voxels")
    rng = np.random.default_rng(rng_seed)
    picks = rng.integers(0, len(set_voxels), size=int(n))
    offsets = rng.random((int(n), 3)) - 0.5
    vox = set_voxels[picks].astype(np.float64) + offsets
    world = vox @ mask.affine[:3, :3].T + mask.affine[:3, 3]
    return world


def sample_directions(n, rng_seed):
    """Unit vectors uniform on the sphere (normalized standard normals)."""
    rng = np.random.default_rng(rng_seed)
    n = int(n)
    if n < 1:
        raise InvalidParameterError("n must be >= 1")
    d = rng.standard_normal((n, 3))
    norms = np.sqrt((d * d).sum(axis=1))
    while np.any(norms < 1e-12):
        redo = norms < 1e-12
        d[redo] = rng.standard_normal((int(redo.sum()), 3))
        norms = np.sqrt((d * d).sum(axis=1))
    return d / norms[:, None]


def accept_seeds(volume, seeds, params, constants):
    """Refine seed directions and keep seeds whose peak clears the cutoff."""
    pos = seeds.positions
    dirs = seeds.directions
    px, py, pz = world_to_voxel_batch(volume, pos[:, 0], pos[:, 1], pos[:, 2])
    inb = in_bounds_batch(volume, px, py, pz)
    (ux, uy, uz), amps, _, _ = run_newton(
        volume,
        (pos[:, 0].copy(), pos[:, 1].copy(), pos[:, 2].copy()),
        (dirs[:, 0].copy(), dirs[:, 1].copy(), dirs[:, 2].copy()),
        constants,
    )
    amps = np.asarray(amps, dtype=np.float64)
    accepted = inb & (amps > params.amplitude_threshold)
    refined = np.stack([ux, uy, uz], axis=1)
    out_dirs = np.where(accepted[:, None], refined, dirs)
    reasons = tuple(
        None
        if accepted[i]
        else (TerminationReason.EXIT_IMAGE if not inb[i] else TerminationReason.SEED_REJECTED)
        for i in range(len(pos))
    )
    return SeedBatch(
        positions=pos, directions=out_dirs, accepted=accepted, reject_reasons=reasons
    )


class _PropagationTrace:
    """Discrete-decision history collected for gradient-check comparison.

    Per propagation step this stores, per element, the Newton freeze
    iteration and the degenerate/flat branch counts; a perturbation that
    changes any of them crossed a jump of the piecewise-smooth map.
    """

    def __init__(self):
        self.decisions = []

    def pattern_for(self, element):
        return tuple(tuple(int(v) for v in d[element]) for d in self.decisions)


def _propagate_core(
    volume, mask, seeds, params, constants, tape=None, coeff_offsets=None, trace=None
):
    n = len(seeds)
    t_max = params.max_points
    # complex coefficients run the dual-number test probe; keep their
    # perturbation parts in the output
    pdtype = complex if np.iscomplexobj(volume.coeffs) else np.float64
    points = np.zeros((n, t_max, 3), dtype=pdtype)
    valid = np.ones(n, dtype=np.int64)
    reasons = [None] * n
    active = seeds.accepted.copy()
    for i in range(n):
        if not active[i]:
            reasons[i] = seeds.reject_reasons[i] or TerminationReason.SEED_REJECTED
    points[:, 0, :] = seeds.positions

    pos = seeds.positions
    dirs = seeds.directions
    if tape is not None:
        x = tuple(
            eg.TapeArray.from_values([tape.lift(v) for v in pos[:, a]]) for a in range(3)
        )
        d = tuple(eg.TapeArray.constants(dirs[:, a]) for a in range(3))
        for b in range(n):
            for a in range(3):
                tape.note_output((b, 0, a), x[a][b])
    else:
        x = tuple(np.ascontiguousarray(pos[:, a]) for a in range(3))
        d = tuple(np.ascontiguousarray(dirs[:, a]) for a in range(3))

    # Algorithm step zero: refine the initial directions at the seeds.
    d, amp, _, decisions = run_newton(volume, x, d, constants, tape, coeff_offsets)
    if trace is not None:
        trace.decisions.append(decisions)
    refined_d0 = np.stack([eg.values(c) for c in d], axis=1)

    cos_thresh = math.cos(params.angle_threshold)
    step = params.step_size
    d_prev_vals = None

    def deactivate(condition, reason, length):
        newly = active & condition
        if newly.any():
            for i in np.flatnonzero(newly):
                reasons[i] = reason
                valid[i] = length
            active[newly] = False

    for t in range(t_max - 1):
        px, py, pz = world_to_voxel_batch(volume, *x)
        deactivate(~in_bounds_batch(volume, px, py, pz), TerminationReason.EXIT_IMAGE, t + 1)
        amp_vals = np.asarray(eg.values(amp), dtype=np.float64)
        deactivate(amp_vals < params.amplitude_threshold, TerminationReason.MODEL, t + 1)
        d_vals = np.stack([eg.values(c) for c in d], axis=1)
        if t > 0:
            cosang = (d_vals * d_prev_vals).sum(axis=1)
            deactivate(cosang < cos_thresh, TerminationReason.HIGH_CURVATURE, t + 1)
        d_prev_vals = d_vals

        xn = tuple(x[a] + step * d[a] for a in range(3))
        dn, ampn, _, decisions = run_newton(volume, xn, d, constants, tape, coeff_offsets)
        if trace is not None:
            trace.decisions.append(decisions)
        deactivate(~mask_contains_batch(mask, *xn), TerminationReason.EXIT_MASK, t + 1)

        if active.any():
            xn_vals = np.stack(
                [c if isinstance(c, np.ndarray) else np.asarray(eg.values(c)) for c in xn],
                axis=1,
            )
            points[active, t + 1, :] = xn_vals[active]
            valid[active] = t + 2
            if tape is not None:
                for b in np.flatnonzero(active):
                    for a in range(3):
                        tape.note_output((int(b), t + 1, a), xn[a][int(b)])
        x = tuple(eg.select(active, xn[a], x[a]) for a in range(3))
        d = tuple(eg.select(active, dn[a], d[a]) for a in range(3))
        amp = eg.select(active, ampn, amp)

    for i in np.flatnonzero(active):
        reasons[i] = TerminationReason.LENGTH_EXCEED
    batch = StreamlineBatch(
        points=points, valid_lengths=valid, termination_reasons=tuple(reasons)
    )
    return batch, refined_d0


def _slice_seeds(seeds, lo, hi):
    return SeedBatch(
        positions=seeds.positions[lo:hi],
        directions=seeds.directions[lo:hi],
        accepted=seeds.accepted[lo:hi],
        reject_reasons=seeds.reject_reasons[lo:hi],
    )


def propagate_batch(
    volume,
    mask,
    seeds,
    params,
    constants,
    tape=None,
    threads=1,
    coeff_offsets=None,
):
    """Propagate every seed to the point cap; see the module docstring.

    ``threads`` partitions the batch into contiguous sub-batches processed
    on worker threads and merged by index; per-element results do not
    depend on the partitioning.  A tape requires single-threaded execution.
    """
    check_grid_compatible(volume, mask)
    threads = max(1, int(threads))
    if tape is not None and threads > 1:
        raise InvalidParameterError(
            "taped propagation is single-threaded; partition sub-batches with their own tapes"
        )
    n = len(seeds)
    if threads == 1 or n < 2:
        batch, _ = _propagate_core(
            volume, mask, seeds, params, constants, tape, coeff_offsets, None
        )
        return batch
    bounds = np.linspace(0, n, threads + 1).astype(int)
    chunks = [
        (int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo
    ]
    offsets_for = (
        lambda lo, hi: None if coeff_offsets is None else coeff_offsets[lo:hi]
    )
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(
            pool.map(
                lambda span: _propagate_core(
                    volume,
                    mask,
                    _slice_seeds(seeds, span[0], span[1]),
                    params,
                    constants,
                    None,
                    offsets_for(span[0], span[1]),
                    None,
                )[0],
                chunks,
            )
        )
    points = np.concatenate([p.points for p in parts], axis=0)
    valid = np.concatenate([p.valid_lengths for p in parts])
    reasons = tuple(r for p in parts for r in p.termination_reasons)
    return StreamlineBatch(points=points, valid_lengths=valid, termination_reasons=reasons)


def propagate_bidirectional(volume, mask, seeds, params, constants, tape=None):
    """Track forward from d0 and backward from -d0, sharing the seed point.

    The backward half is reversed and concatenated before the seed, which
    is stored once; the reported termination reason is the forward pass's.
    """
    if not params.bidirectional:
        raise InvalidParameterError("params.bidirectional must be true")
    check_grid_compatible(volume, mask)
    fwd, refined_d0 = _propagate_core(volume, mask, seeds, params, constants, tape)
    back_dirs = np.where(seeds.accepted[:, None], -refined_d0, seeds.directions)
    back_seeds = SeedBatch(
        positions=seeds.positions,
        directions=back_dirs,
        accepted=seeds.accepted,
        reject_reasons=seeds.reject_reasons,
    )
    bwd, _ = _propagate_core(volume, mask, back_seeds, params, constants, tape)

    n = len(seeds)
    t_max = params.max_points
    t_combined = 2 * t_max - 1
    points = np.zeros((n, t_combined, 3))
    valid = np.zeros(n, dtype=np.int64)
    reasons = []
    for i in range(n):
        lf = int(fwd.valid_lengths[i])
        lb = int(bwd.valid_lengths[i])
        total = lf + lb - 1
        assert total <= t_combined
        if lb > 1:
            points[i, : lb - 1] = bwd.points[i, 1:lb][::-1]
        points[i, lb - 1] = seeds.positions[i]
        if lf > 1:
            points[i, lb : lb + lf - 1] = fwd.points[i, 1:lf]
        valid[i] = total
        reasons.append(fwd.termination_reasons[i])
    return StreamlineBatch(
        points=points, valid_lengths=valid, termination_reasons=tuple(reasons)
    )


def crop_to_valid(batch, params):
    """Strip padding and keep streamlines whose arc length is in range."""
    out = []
    for i in range(len(batch.valid_lengths)):
        length = int(batch.valid_lengths[i])
        arc = (length - 1) * params.step_size
        if params.min_length <= arc <= params.max_length:
            out.append(batch.points[i, :length].copy())
    return out
