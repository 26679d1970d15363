"""Command line entry point: ``evrecon <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

import argparse
import copy
import logging
import os
import sys

import numpy as np

from . import events as ev
from . import pipeline as pl
from .errors import ConfigError, EvreconError, StageFailure
from .fileio import write_pfm

log = logging.getLogger("evrecon")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _apply_thread_cap():
    cap = os.environ.get("EVRECON_THREADS")
    if not cap:
        return
    try:
        n = int(cap)
    except ValueError:
        raise ConfigError(f"EVRECON_THREADS must be an integer, got {cap!r}") from None
    if n < 1:
        raise ConfigError("EVRECON_THREADS must be >= 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _sensor_args(p):
    p.add_argument("--events", required=True, help="event file (text or binary)")
    p.add_argument("--width", type=int, default=346)
    p.add_argument("--height", type=int, default=260)
    p.add_argument("--format", choices=("auto", "text", "binary"), default="auto")
    p.add_argument("--time-unit", choices=("s", "us"), default="s")
    p.add_argument("--lenient", action="store_true", help="sort out-of-order timestamps instead of failing")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--window-count", type=int, default=0, help="events per window (0: default size)")
    g.add_argument("--window-us", type=int, default=0, help="window duration in microseconds")


def _read_stream(args):
    geo = ev.SensorGeometry(args.width, args.height)
    if not os.path.exists(args.events):
        raise ConfigError(f"event file not found: {args.events}")
    fmt = None if args.format == "auto" else args.format
    return ev.read_events(args.events, geo, fmt=fmt, time_unit=args.time_unit, strict=not args.lenient)


def _windows(stream, args):
    if args.window_us:
        return ev.window_by_duration(stream, args.window_us)
    return ev.window_by_count(stream, args.window_count or ev.default_window_size(stream.geometry))


def _base_config(out, seed=0, camera=None):
    data = copy.deepcopy(pl.DEFAULTS)
    data["output"] = os.path.abspath(out)
    data["seed"] = seed
    if camera is not None:
        data["camera"] = camera
    return pl.PipelineConfig(data, os.getcwd())


def _camera_arg(args):
    if args.camera is None:
        return None
    vals = [float(v) for v in args.camera.split(",")]
    if len(vals) not in (4, 5):
        raise ConfigError("--camera expects fx,fy,cx,cy[,k1]")
    return dict(zip(("fx", "fy", "cx", "cy", "k1"), vals))


# ------------------------------------------------------------ commands


def cmd_pipeline(args):
    cfg = pl.load_config(args.config, overrides={"seed": args.seed, "output": args.out})
    arts = pl.run_pipeline(cfg, stage_only=args.stage_only, force=args.force)
    for a in arts:
        print(f"{a.stage:9s} {'skipped' if a.skipped else 'ran':8s} {a.input_hash}  {len(a.outputs)} files")
    return EXIT_OK


def cmd_events_to_frames(args):
    stream = _read_stream(args)
    os.makedirs(args.out, exist_ok=True)
    for k, win in enumerate(_windows(stream, args)):
        frame = ev.accumulate_frame(win, stream.geometry)
        write_pfm(os.path.join(args.out, f"events_{k:06d}.pfm"), frame.values.astype(np.float32))
    return EXIT_OK


def cmd_events_to_voxel(args):
    stream = _read_stream(args)
    os.makedirs(args.out, exist_ok=True)
    for k, win in enumerate(_windows(stream, args)):
        grid = ev.encode_voxel_grid(win, stream.geometry, bins=args.bins)
        np.save(os.path.join(args.out, f"voxel_{k:06d}.npy"), grid.values)
    return EXIT_OK


def cmd_reconstruct(args):
    cfg = _base_config(args.out)
    cfg.data["input"].update(events=os.path.abspath(args.events), format=args.format, time_unit=args.time_unit,
                             width=args.width, height=args.height, strict=not args.lenient)
    if args.window_us:
        cfg.data["windows"].update(policy="duration", duration_us=args.window_us)
    else:
        cfg.data["windows"].update(policy="count", count=args.window_count)
    cfg.data["reconstruction"].update(contrast=args.contrast, decay=args.decay)
    pl.validate(cfg)
    pl.run_pipeline(cfg, stage_only="frames", force=True)
    return EXIT_OK


def cmd_sfm(args):
    cfg = _base_config(args.out, args.seed, _camera_arg(args))
    cfg.data["reconstruction"].update(method="external", manifest=os.path.abspath(args.frames))
    cfg.data["features"].update(exhaustive=not args.sequential, window=args.window)
    cfg.data["mvs"]["enabled"] = False
    pl.validate(cfg)
    for stage in ("frames", "features", "matches", "sfm"):
        pl.run_pipeline(cfg, stage_only=stage)
    return EXIT_OK


def cmd_mvs(args):
    cfg = _base_config(args.out, args.seed)
    cfg.data["mvs"].update(radius=args.radius, iterations=args.iterations, num_neighbors=args.neighbors)
    pl.validate(cfg)
    out = cfg.output
    sparse = os.path.join(out, "sparse")
    if not os.path.exists(os.path.join(sparse, "images.txt")):
        raise ConfigError(f"no sparse model in {sparse}; run 'evrecon sfm' first")
    pl.run_pipeline(cfg, stage_only="mvs", force=True)
    return EXIT_OK


def cmd_simulate(args):
    from . import sim
    from .fileio import write_trajectory

    os.makedirs(args.out, exist_ok=True)
    if args.scene == "orbit":
        scene = sim.orbit_scene(views=args.views, seed=args.seed)
        seq = sim.render_times(scene, sim.orbit_sample_times(scene))
        gt_times = [int(round(t * 1e6)) for t in scene.view_times]
        window = {"policy": "duration", "duration_us": int(round(scene.period * 1e6))}
    else:
        geo = ev.SensorGeometry(346, 260)
        tex = sim.ValueNoiseTexture(seed=args.seed, base_cell=0.1)
        scene = sim.plane_scene(geo, step=0.5, frames=args.views, texture=tex, half_extent=1.5, seed=args.seed)
        seq = sim.render_sequence(scene, args.views, 30.0)
        gt_times = seq.times_us
        window = {"policy": "count", "count": 0}
    stream = sim.generate_events(seq.frames)
    ext = ".bin" if args.binary else ".txt"
    ev.write_events(stream, os.path.join(args.out, "events" + ext))
    write_trajectory(os.path.join(args.out, "groundtruth.txt"), gt_times,
                     [scene.trajectory.pose_at(t * 1e-6) for t in gt_times])
    k = scene.intrinsics
    g = scene.geometry
    win = "\n".join(f"{key} = {val!r}".replace("'", '"') for key, val in window.items())
    with open(os.path.join(args.out, "config.toml"), "w") as fh:
        fh.write(f'seed = {args.seed}\noutput = "out"\n\n[input]\nevents = "events{ext}"\n'
                 f"width = {g.w}\nheight = {g.h}\n\n[windows]\n{win}\n\n"
                 f"[reconstruction]\ndecay = 0.0\n\n"
                 f"[camera]\nfx = {k.fx!r}\nfy = {k.fy!r}\ncx = {k.cx!r}\ncy = {k.cy!r}\n")
    print(f"{len(stream)} events, {len(gt_times)} ground-truth poses -> {args.out}")
    return EXIT_OK


def cmd_report(args):
    from .report import write_report

    paths = write_report(args.out, gt_path=args.gt, report_dir=args.report_dir)
    for p in paths:
        print(p)
    return EXIT_OK


# ------------------------------------------------------------ parser


def build_parser():
    ap = argparse.ArgumentParser(prog="evrecon", description="Event-camera 3D reconstruction pipeline.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pipeline", help="run all stages from a TOML config (resumable)")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--stage-only", choices=pl.STAGES)
    p.add_argument("--force", action="store_true", help="ignore stage hashes and rerun")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("events-to-frames", help="per-window polarity sums as PFM")
    _sensor_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_events_to_frames)

    p = sub.add_parser("events-to-voxel", help="per-window voxel grids as .npy")
    _sensor_args(p)
    p.add_argument("--bins", type=int, default=ev.DEFAULT_BINS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_events_to_voxel)

    p = sub.add_parser("reconstruct", help="intensity images from events (integrator)")
    _sensor_args(p)
    p.add_argument("--contrast", type=float, default=0.1)
    p.add_argument("--decay", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sfm", help="features, matching and incremental SfM on a frame manifest")
    p.add_argument("--frames", required=True, help="manifest of 't path' lines")
    p.add_argument("--camera", help="fx,fy,cx,cy[,k1]; omitted: estimated")
    p.add_argument("--sequential", action="store_true", help="match only within --window neighbours")
    p.add_argument("--window", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sfm)

    p = sub.add_parser("mvs", help="PatchMatch depth maps and fusion for an sfm output directory")
    p.add_argument("--out", required=True, help="directory written by 'evrecon sfm'")
    p.add_argument("--radius", type=int, default=5)
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--neighbors", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mvs)

    p = sub.add_parser("simulate", help="write a synthetic event stream, ground truth and config")
    p.add_argument("--scene", choices=("orbit", "plane"), default="orbit")
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--binary", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="figures and tables for a pipeline output directory")
    p.add_argument("--out", required=True, help="pipeline output directory")
    p.add_argument("--gt", help="ground-truth trajectory (one pose per frame)")
    p.add_argument("--report-dir", help="default: <out>/report")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_thread_cap()
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except EvreconError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
