"""Command-line interface: track, gradcheck, compare, synth.

All lengths are millimetres and all angles degrees on the command line
(converted to radians internally).  Exit code 0 means success, 1 means a
validation or runtime failure; malformed inputs never produce a traceback.
The environment variable DIFFTRACK_THREADS overrides --threads.
"""

import argparse
import math
import os
import sys
import time

import numpy as np

from .errors import DifftrackError
from .gradcheck import run_gradcheck
from .metrics import hausdorff, percentile_report
from .nifti import load_mask, load_volume, save_mask, save_volume
from .peaks import NewtonConstants
from .propagate import (
    SeedBatch,
    TerminationReason,
    TrackingParams,
    accept_seeds,
    propagate_batch,
    propagate_bidirectional,
    sample_directions,
    sample_seeds,
)
from .synth import KINDS, full_mask, make_volume
from .tables import (
    load_seed_table,
    save_distance_table,
    save_gradcheck_table,
    save_seed_table,
)
from .tracks import load_tracks, save_tracks

MAX_RETRY_ROUNDS = 1000


class _CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _CliError(message)


def _parse_triple(text, what):
    parts = text.split(",")
    if len(parts) != 3:
        raise _CliError(f"{what} must be three comma-separated values, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise _CliError(f"non-numeric {what}: {text!r}")


def _parse_dims(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise _CliError(f"--dims must be nx,ny,nz, got {text!r}")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise _CliError(f"non-integer --dims: {text!r}")
    if any(d < 1 for d in dims):
        raise _CliError(f"--dims must be positive, got {dims}")
    return dims


def _thread_count(requested):
    env = os.environ.get("DIFFTRACK_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise _CliError(f"DIFFTRACK_THREADS must be an integer, got {env!r}")
    if requested is not None:
        return max(1, requested)
    return os.cpu_count() or 1


def _max_points(params_maxlen, step, bidirectional=False):
    # the length cap applies to the whole streamline, so each half of a
    # bidirectional run gets half the budget
    budget = params_maxlen / 2.0 if bidirectional else params_maxlen
    return max(2, int(math.ceil(budget / step)) + 1)


def _build_parser():
    parser = _Parser(prog="difftrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    track = sub.add_parser("track", help="propagate streamlines through an FOD volume")
    track.add_argument("--fod", required=True)
    track.add_argument("--mask", required=True)
    track.add_argument("--seeds", help="seed table CSV (positions + initial directions)")
    track.add_argument("--n", type=int, help="number of seeds to sample")
    track.add_argument("--seed-mask", help="mask image to sample seeds in")
    track.add_argument("--step", type=float, default=1.0, help="step size in mm")
    track.add_argument("--cutoff", type=float, default=0.1, help="FOD amplitude cutoff")
    track.add_argument("--angle", type=float, default=45.0, help="max turn per step, degrees")
    track.add_argument("--minlen", type=float, default=0.0, help="minimum length in mm")
    track.add_argument("--maxlen", type=float, default=100.0, help="maximum length in mm")
    track.add_argument("--bidirectional", action="store_true")
    track.add_argument("--rng", type=int, default=0, help="random seed")
    track.add_argument("--out", required=True, help="output .tck path")
    track.add_argument("--save-seeds", help="write the sampled seed table here")
    track.add_argument(
        "--retry-until-n",
        action="store_true",
        help="resample rejected seeds until --n accepted streamlines exist",
    )
    track.add_argument("--threads", type=int, default=None)

    grad = sub.add_parser("gradcheck", help="verify streamline gradients by finite differences")
    grad.add_argument("--fod", required=True)
    grad.add_argument("--mask", required=True)
    grad.add_argument("--seed", required=True, help="seed position x,y,z in mm")
    grad.add_argument("--dir", required=True, help="initial direction dx,dy,dz")
    grad.add_argument("--coordinate", required=True, help="t,axis with axis one of x,y,z")
    grad.add_argument("--fd-step", type=float, default=1e-4)
    grad.add_argument("--out", required=True, help="output CSV path")
    grad.add_argument("--step", type=float, default=1.0)
    grad.add_argument("--cutoff", type=float, default=0.1)
    grad.add_argument("--angle", type=float, default=45.0)
    grad.add_argument("--max-points", type=int, default=51)

    comp = sub.add_parser("compare", help="pairwise Hausdorff distances between two track files")
    comp.add_argument("--a", required=True)
    comp.add_argument("--b", required=True)
    comp.add_argument("--crop-to-shorter", action="store_true")
    comp.add_argument("--out", required=True, help="output CSV path")
    comp.add_argument("--plot", default=None, help="figure path (default: <out>.png)")
    comp.add_argument("--no-plot", action="store_true", help="skip the figure")

    synth = sub.add_parser("synth", help="write synthetic FOD test volumes")
    synth.add_argument("--kind", required=True, choices=KINDS)
    synth.add_argument("--dims", required=True, help="nx,ny,nz")
    synth.add_argument("--lmax", type=int, default=8)
    synth.add_argument("--axis", default="1,0,0", help="lobe axis ax,ay,az")
    synth.add_argument("--voxel", default="1,1,1", help="voxel size in mm")
    synth.add_argument("--out", required=True, help="output volume path")
    synth.add_argument("--mask-out", help="optional all-ones mask path")
    return parser


def _cmd_track(args):
    volume = load_volume(args.fod)
    mask = load_mask(args.mask)
    step = args.step
    params = TrackingParams(
        step_size=step,
        amplitude_threshold=args.cutoff,
        angle_threshold=math.radians(args.angle),
        max_points=_max_points(args.maxlen, step, args.bidirectional),
        min_length=args.minlen,
        max_length=args.maxlen,
        bidirectional=args.bidirectional,
        rng_seed=args.rng,
    )
    constants = NewtonConstants()
    threads = _thread_count(args.threads)

    if args.seeds:
        if args.retry_until_n:
            raise _CliError("--retry-until-n requires sampled seeds, not --seeds")
        seed_mask = None
    else:
        if args.n is None or args.seed_mask is None:
            raise _CliError("need either --seeds or both --n and --seed-mask")
        if args.n < 1:
            raise _CliError("--n must be >= 1")
        seed_mask = load_mask(args.seed_mask)

    kept = []
    all_positions = []
    all_directions = []
    counts = {reason: 0 for reason in TerminationReason}
    accepted_total = 0
    started = time.perf_counter()

    def run_round(positions, directions, retry_filter):
        nonlocal accepted_total
        all_positions.append(positions)
        all_directions.append(directions)
        seeds = accept_seeds(
            volume,
            SeedBatch(
                positions=positions,
                directions=directions,
                accepted=np.ones(len(positions), dtype=bool),
            ),
            params,
            constants,
        )
        if retry_filter:
            # rejected seeds are replaced by fresh ones next round; count
            # them here and drop their slots
            keep = seeds.accepted
            for i in np.flatnonzero(~keep):
                counts[seeds.reject_reasons[i]] += 1
            if not keep.any():
                return
            seeds = SeedBatch(
                positions=seeds.positions[keep],
                directions=seeds.directions[keep],
                accepted=seeds.accepted[keep],
                reject_reasons=tuple(r for r, k in zip(seeds.reject_reasons, keep) if k),
            )
        if params.bidirectional:
            batch = propagate_bidirectional(volume, mask, seeds, params, constants)
        else:
            batch = propagate_batch(volume, mask, seeds, params, constants, threads=threads)
        accepted_total += int(seeds.accepted.sum())
        for i, reason in enumerate(batch.termination_reasons):
            counts[reason] += 1
            if not seeds.accepted[i]:
                continue
            length = int(batch.valid_lengths[i])
            arc = (length - 1) * step
            if params.min_length <= arc <= params.max_length:
                kept.append(batch.points[i, :length].copy())

    if args.seeds:
        positions, directions = load_seed_table(args.seeds)
        run_round(positions, directions, retry_filter=False)
    elif not args.retry_until_n:
        positions = sample_seeds(seed_mask, args.n, args.rng)
        directions = sample_directions(args.n, args.rng + 1)
        run_round(positions, directions, retry_filter=False)
    else:
        round_index = 0
        while accepted_total < args.n:
            if round_index >= MAX_RETRY_ROUNDS:
                raise _CliError(
                    f"gave up after {MAX_RETRY_ROUNDS} seeding rounds with only "
                    f"{accepted_total} of {args.n} seeds accepted; lower --cutoff?"
                )
            want = args.n - accepted_total
            positions = sample_seeds(seed_mask, want, args.rng + 2 * round_index)
            directions = sample_directions(want, args.rng + 2 * round_index + 1)
            run_round(positions, directions, retry_filter=True)
            round_index += 1

    save_tracks(args.out, kept)
    if args.save_seeds:
        save_seed_table(
            args.save_seeds,
            np.concatenate(all_positions, axis=0),
            np.concatenate(all_directions, axis=0),
        )
    elapsed = time.perf_counter() - started
    print(f"wrote {len(kept)} streamlines to {args.out} in {elapsed:.2f}s")
    for reason in TerminationReason:
        print(f"  {reason.value}: {counts[reason]}")
    return 0


def _cmd_gradcheck(args):
    volume = load_volume(args.fod)
    mask = load_mask(args.mask)
    seed = np.array(_parse_triple(args.seed, "--seed"))
    direction = np.array(_parse_triple(args.dir, "--dir"))
    norm = math.sqrt(float((direction * direction).sum()))
    if norm < 1e-12:
        raise _CliError("--dir must be non-zero")
    direction = direction / norm
    coord = args.coordinate.split(",")
    if len(coord) != 2:
        raise _CliError("--coordinate must be t,axis")
    try:
        t_idx = int(coord[0])
    except ValueError:
        raise _CliError(f"non-integer step index {coord[0]!r}")
    axis_names = {"x": 0, "y": 1, "z": 2, "0": 0, "1": 1, "2": 2}
    if coord[1].strip().lower() not in axis_names:
        raise _CliError(f"axis must be x, y or z, got {coord[1]!r}")
    axis = axis_names[coord[1].strip().lower()]
    params = TrackingParams(
        step_size=args.step,
        amplitude_threshold=args.cutoff,
        angle_threshold=math.radians(args.angle),
        max_points=args.max_points,
        min_length=0.0,
        max_length=(args.max_points - 1) * args.step,
    )
    report = run_gradcheck(
        volume,
        mask,
        seed,
        direction,
        (t_idx, axis),
        params,
        NewtonConstants(),
        fd_step=args.fd_step,
    )
    save_gradcheck_table(
        args.out,
        [(r.voxel, r.coeff, r.analytic, r.numeric, r.rel_err) for r in report.rows],
    )
    for key in report.excluded:
        print(
            f"warning: decision pattern flipped under perturbation of "
            f"voxel {key[0]} coeff {key[1]}; excluded (gradient is defined "
            f"at fixed pattern)",
            file=sys.stderr,
        )
    print(
        f"checked {len(report.rows)} partials "
        f"(streamline length {report.valid_length}, {report.termination.value}, "
        f"{report.tape_nodes} tape nodes)"
    )
    print(f"max rel err {report.max_rel_err:.3e} in {report.wall_time:.2f}s")
    return 0 if report.max_rel_err <= 1e-4 else 1


def _cmd_compare(args):
    tracks_a = load_tracks(args.a)
    tracks_b = load_tracks(args.b)
    if len(tracks_a) != len(tracks_b) and not args.crop_to_shorter:
        print(
            f"error: track counts differ: {len(tracks_a)} vs {len(tracks_b)} "
            f"(use --crop-to-shorter to compare the common prefix)",
            file=sys.stderr,
        )
        return 1
    n = min(len(tracks_a), len(tracks_b))
    if n == 0:
        print("error: no streamline pairs to compare", file=sys.stderr)
        return 1
    distances = []
    for i in range(n):
        a, b = tracks_a[i], tracks_b[i]
        if args.crop_to_shorter:
            m = min(len(a), len(b))
            a, b = a[:m], b[:m]
        distances.append(hausdorff(a, b))
    report = percentile_report(np.array(distances))
    save_distance_table(args.out, report.pair_distances)
    print(f"{n} pairs; {report.count_below_1mm} below 1 mm")
    for rank in sorted(report.percentiles):
        print(f"  p{rank}: {report.percentiles[rank]:.6g} mm")
    if not args.no_plot:
        from .plots import save_distance_plot

        plot_path = args.plot or (os.path.splitext(args.out)[0] + ".png")
        save_distance_plot(report, plot_path)
        print(f"wrote figure {plot_path}")
    return 0


def _cmd_synth(args):
    dims = _parse_dims(args.dims)
    axis = np.array(_parse_triple(args.axis, "--axis"))
    voxel = _parse_triple(args.voxel, "--voxel")
    if any(v <= 0 for v in voxel):
        raise _CliError(f"--voxel must be positive, got {voxel}")
    volume = make_volume(args.kind, dims, args.lmax, axis=axis, voxel_size=voxel)
    save_volume(args.out, volume)
    print(f"wrote {args.kind} volume {dims} lmax={args.lmax} to {args.out}")
    if args.mask_out:
        save_mask(args.mask_out, full_mask(volume))
        print(f"wrote mask to {args.mask_out}")
    return 0


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "track":
            return _cmd_track(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "synth":
            return _cmd_synth(args)
        raise _CliError(f"unknown command {args.command!r}")
    except _CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DifftrackError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
