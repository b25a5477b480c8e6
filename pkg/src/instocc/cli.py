"""Command-line entry point: ``instocc <subcommand> ...``

Exit codes: 0 ok, 1 usage error, 2 I/O or parse error, 3 invariant or
evaluation failure. Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import inspect
import sys
import time

import numpy as np

from . import io as occio
from .core import VoxelGridSpec
from .errors import FormatError, InstOccError, InvariantViolation
from .metrics import DEFAULT_IOU_THRESHOLDS, map_occ
from .splat import SplatConfig, default_threads, splat_scene
from .supervision import gradient_check, hungarian_check
from .track import TrackBankConfig, count_id_switches, run_sequence

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FAIL = 0, 1, 2, 3
_IDS_IOU = inspect.signature(count_id_switches).parameters["iou_threshold"].default


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _grid_from_args(args) -> VoxelGridSpec:
    lo, hi = args.range[:3], args.range[3:]
    return VoxelGridSpec(lo, hi, (args.voxel_size,) * 3)


def build_parser() -> argparse.ArgumentParser:
    defaults = SplatConfig()
    track_defaults = TrackBankConfig()
    p = _Parser(prog="instocc", description="Gaussian instance occupancy toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add_splat_opts(sp):
        sp.add_argument("--threshold", type=float, default=defaults.occupancy_threshold)
        sp.add_argument("--cutoff", type=float, default=defaults.cutoff)
        sp.add_argument("--epsilon", type=float, default=defaults.saturation_epsilon)
        sp.add_argument("--scale-floor", type=float, default=defaults.scale_floor)
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $GUIDE_THREADS or 1)")

    sp = sub.add_parser("splat", help="splat every frame of a scene to GOCC")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--voxel-size", type=float, default=None,
                    help="override the header resolution, same extent")
    sp.add_argument("--oracle", action="store_true", help="use the dense brute-force splatter")
    add_splat_opts(sp)

    sp = sub.add_parser("eval", help="instance mAP and semantic mIoU of GOCC predictions")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--ious", type=_floats, default=DEFAULT_IOU_THRESHOLDS)
    sp.add_argument("--json", default=None, help="also write the report as JSON here")

    sp = sub.add_parser("track", help="run the instance bank over a scene and count ID switches")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--t-track", type=float, default=track_defaults.t_track)
    sp.add_argument("--top-k", type=int, default=track_defaults.top_k)
    sp.add_argument("--max-age", type=int, default=track_defaults.max_age)
    sp.add_argument("--gate-radius", type=float, default=track_defaults.gate_radius)
    sp.add_argument("--frame-dt", type=float, default=track_defaults.frame_dt)
    sp.add_argument("--iou", type=float, default=_IDS_IOU, help="IoU threshold for GT matching")
    add_splat_opts(sp)

    sp = sub.add_parser("synth", help="generate a synthetic scene and its GT occupancy")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--frames", type=int, default=5)
    sp.add_argument("--instances", type=int, default=10)
    sp.add_argument("--k", type=int, default=48)
    sp.add_argument("--range", type=_floats, default=(-40.0, -40.0, -1.0, 40.0, 40.0, 5.4),
                    help="xmin,ymin,zmin,xmax,ymax,zmax (write --range=-8,... for negative values)")
    sp.add_argument("--voxel-size", type=float, default=0.4)
    sp.add_argument("--out-scene", required=True)
    sp.add_argument("--out-gt", required=True)
    sp.add_argument("--out-pred", default=None, help="also write noisy detections")

    sub.add_parser("losscheck", help="gradient and assignment self-checks")

    sp = sub.add_parser("bench", help="time splat_scene at a given operating point")
    sp.add_argument("--instances", type=int, default=900)
    sp.add_argument("--k", type=int, default=48)
    sp.add_argument("--voxel-size", type=float, default=0.4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--oracle-instances", type=int, default=0,
                    help="also time the dense oracle on this many instances")
    add_splat_opts(sp)

    sp = sub.add_parser("export-ply", help="write a GOCC frame as a coloured point cloud")
    sp.add_argument("--occ", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--frame", type=int, default=0)
    return p


def _splat_config(args) -> SplatConfig:
    return SplatConfig(args.threshold, args.cutoff, args.epsilon, args.scale_floor)


def _threads(args):
    return default_threads() if args.threads is None else args.threads


def _splat_frames(scene, grid, cfg, threads, oracle=False):
    return [occio.OccFile(grid, splat_scene(fr.instances, grid, cfg, threads, oracle))
            for fr in scene.frames]


def cmd_splat(args, out):
    scene = occio.read_scene(args.scene)
    grid = scene.grid if args.voxel_size is None else scene.grid.with_voxel_size(args.voxel_size)
    frames = _splat_frames(scene, grid, _splat_config(args), _threads(args), args.oracle)
    occio.write_occ_frames(frames, args.out)
    n = sum(len(i) for f in frames for i in f.instances)
    print(f"splatted {len(frames)} frames, {n} occupied voxels, grid dims {grid.dims}", file=out)
    return EXIT_OK


def cmd_eval(args, out):
    preds = occio.read_occ_frames(args.pred)
    gts = occio.read_occ_frames(args.gt)
    if len(preds) != len(gts):
        raise InvariantViolation("frames", f"{len(preds)} prediction frames vs {len(gts)} GT frames")
    report = map_occ([f.instances for f in preds], [f.instances for f in gts], args.ious)
    out.write(report.to_text())
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            f.write(report.to_json() + "\n")
    return EXIT_OK


def cmd_track(args, out):
    scene = occio.read_scene(args.scene)
    gt = occio.read_occ_frames(args.gt)
    if len(gt) != len(scene.frames):
        raise InvariantViolation("frames", f"{len(scene.frames)} scene frames vs {len(gt)} GT frames")
    cfg = TrackBankConfig(args.t_track, args.top_k, args.max_age, args.gate_radius, args.frame_dt)
    annotated, bank = run_sequence([fr.instances for fr in scene.frames], cfg)
    tracked = occio.SceneFile(scene.grid, scene.classes, scene.k,
                              [occio.Frame(fr.t, a) for fr, a in zip(scene.frames, annotated)])
    occio.write_scene(tracked, args.out)
    grid = gt[0].grid if gt else scene.grid
    pred_occ = [splat_scene(a, grid, _splat_config(args), _threads(args)) for a in annotated]
    ids = count_id_switches([f.instances for f in gt], pred_occ, args.iou)
    print("frame  instance  class  score   track_id", file=out)
    for f, dets in enumerate(annotated):
        for n, d in enumerate(dets):
            tid = "-" if d.track_id is None else str(d.track_id)
            print(f"{f:5d}  {n:8d}  {d.class_id:5d}  {d.score:.3f}  {tid:>8}", file=out)
    print(f"ids assigned: {bank.next_id}", file=out)
    print(f"IDS: {ids}", file=out)
    return EXIT_OK


def cmd_synth(args, out):
    if len(args.range) != 6:
        raise UsageError("--range needs 6 comma-separated numbers")
    grid = _grid_from_args(args)
    scene, gt = occio.gen_synthetic(args.seed, args.frames, args.instances, args.k, grid)
    occio.write_scene(scene, args.out_scene)
    occio.write_occ_frames(gt, args.out_gt)
    if args.out_pred:
        occio.write_scene(occio.perturb_scene(scene, args.seed + 1), args.out_pred)
    print(f"wrote {args.frames} frames x {args.instances} instances (k={args.k}), grid dims {grid.dims}",
          file=out)
    return EXIT_OK


def cmd_losscheck(args, out):
    grad_err = gradient_check(1000, seed=0)
    hung_err = hungarian_check(500, seed=0)
    grad_ok, hung_ok = grad_err <= 1e-4, hung_err == 0.0
    print(f"{'PASS' if grad_ok else 'FAIL'} focal gradient vs central differences: "
          f"max rel err {grad_err:.3e} (limit 1e-4)", file=out)
    print(f"{'PASS' if hung_ok else 'FAIL'} hungarian vs brute force: "
          f"max |cost diff| {hung_err:.3e}", file=out)
    return EXIT_OK if grad_ok and hung_ok else EXIT_FAIL


def _peak_rss_mb():
    import resource

    kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return kb / 1024.0 if sys.platform != "darwin" else kb / 2**20


def cmd_bench(args, out):
    grid = VoxelGridSpec.occ3d(args.voxel_size)
    cfg = _splat_config(args)
    scene = bench_scene(args.seed, args.instances, args.k, grid)
    threads = _threads(args)
    t0 = time.perf_counter()
    occ = splat_scene(scene, grid, cfg, threads)
    dt = time.perf_counter() - t0
    nvox = sum(len(o) for o in occ)
    print(f"instances={args.instances} k={args.k} voxel_size={args.voxel_size} "
          f"dims={grid.dims} threads={threads}", file=out)
    print(f"splat_scene wall time: {dt:.3f} s ({1e3 * dt / max(args.instances, 1):.3f} ms/instance)",
          file=out)
    print(f"occupied voxels: {nvox}", file=out)
    if args.oracle_instances > 0:
        m = min(args.oracle_instances, len(scene))
        t0 = time.perf_counter()
        splat_scene(scene[:m], grid, cfg, 1, oracle=True)
        dense = (time.perf_counter() - t0) / m
        t0 = time.perf_counter()
        splat_scene(scene[:m], grid, cfg, 1)
        sparse = (time.perf_counter() - t0) / m
        print(f"dense oracle: {1e3 * dense:.1f} ms/instance, sparse: {1e3 * sparse:.2f} ms/instance, "
              f"speedup {dense / sparse:.1f}x", file=out)
    print(f"peak resident memory: {_peak_rss_mb():.1f} MB", file=out)
    return EXIT_OK


def bench_scene(seed, n_instances, k, grid):
    """Random single-frame instances spread over the grid; no GT splatting."""
    from .core import Gaussian3D, InstanceAnchor, InstancePrediction

    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(grid.min_corner), np.asarray(grid.max_corner)
    out = []
    for n in range(n_instances):
        extent = rng.uniform([1.0, 1.0, 1.0], [4.5, 4.5, 2.0])
        anchor = InstanceAnchor.from_yaw(rng.uniform(lo, hi), extent, rng.uniform(-np.pi, np.pi))
        gs = []
        for _ in range(k):
            q = rng.normal(size=4)
            gs.append(Gaussian3D.create(rng.uniform(-0.5, 0.5, 3) * extent,
                                        rng.uniform(0.1, 0.5, 3), q / np.linalg.norm(q)))
        out.append(InstancePrediction(int(rng.integers(10)), float(rng.random()), anchor, gs))
    return out


def cmd_export_ply(args, out):
    frames = occio.read_occ_frames(args.occ)
    if not 0 <= args.frame < len(frames):
        raise UsageError(f"--frame {args.frame} outside [0, {len(frames)})")
    occio.export_ply(frames[args.frame], args.out)
    print(f"wrote {sum(len(i) for i in frames[args.frame].instances)} vertices to {args.out}", file=out)
    return EXIT_OK


COMMANDS = {
    "splat": cmd_splat,
    "eval": cmd_eval,
    "track": cmd_track,
    "synth": cmd_synth,
    "losscheck": cmd_losscheck,
    "bench": cmd_bench,
    "export-ply": cmd_export_ply,
}


def run(argv=None, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "instocc: error: a subcommand is required")
        return COMMANDS[args.command](args, out)
    except UsageError as e:
        print(e, file=err)
        return EXIT_USAGE
    except (OSError, FormatError) as e:
        print(f"instocc: {e}", file=err)
        return EXIT_IO
    except InstOccError as e:
        print(f"instocc: {e}", file=err)
        return EXIT_FAIL


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
