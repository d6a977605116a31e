"""``voxmarch`` command line: render, bench, train and render-dynamic."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from . import kernels
from .camera import PinholeCamera, generate_rays, look_at
from .contraction import AabbNormalize, SphereContract
from .fields import Checker, SolidSphere, TimeConditionedField, TrilinearVoxelField, UniformBox
from .marching import MarchingConfig
from .occupancy import OccupancyGrid
from .pipeline import render_rays, to_uint8, uniform_sample_count, warm_up_grid, write_ppm
from .train import TrainingDiverged, TrainSettings, train_voxel_field
from .types import Aabb

SCHEMA = 1
SCENES = ("empty", "sphere", "box", "checker")


class CliError(Exception):
    pass


def _add_marching_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("marching")
    g.add_argument("--near-plane", type=float, default=0.2)
    g.add_argument("--far-plane", type=float, default=1.0)
    g.add_argument("--early-stop-eps", type=float, default=1e-4)
    g.add_argument("--alpha-thre", type=float, default=1e-2)
    g.add_argument("--step-size", type=float, default=None,
                   help="world-space step (default: domain diagonal / 1024)")
    g.add_argument("--step-growth", type=float, default=1.0,
                   help="per-step growth outside the inner ball (sphere contraction only)")
    g.add_argument("--max-samples", type=int, default=2048, help="cap on samples per ray")
    g = p.add_argument_group("occupancy grid")
    g.add_argument("--grid-resolution", type=int, default=128)
    g.add_argument("--contraction", choices=("aabb", "sphere"), default="aabb")
    g.add_argument("--grid-updates", type=int, default=32, help="warm-up updates before rendering")
    g.add_argument("--ema-decay", type=float, default=0.95)
    g = p.add_argument_group("run")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--threads", type=int, default=1)
    g.add_argument("--chunk", type=int, default=1 << 13, help="rays per marching chunk")
    g.add_argument("--no-timing", action="store_true", help="omit wall-clock fields from the report")


def _add_scene_flags(p: argparse.ArgumentParser, default: str = "sphere") -> None:
    g = p.add_argument_group("scene")
    g.add_argument("--scene", default=default,
                   help=f"one of {', '.join(SCENES)}, or a .vxfd voxel checkpoint")
    g.add_argument("--aabb-size", type=float, default=1.0, help="side of the cubic scene domain centered at 0")
    g.add_argument("--sigma", type=float, default=None)
    g.add_argument("--radius", type=float, default=None)
    g.add_argument("--center", type=float, nargs=3, default=None)
    g.add_argument("--rgb", type=float, nargs=3, default=None)
    g.add_argument("--period", type=float, default=None, help="checker period")


def _add_camera_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("camera")
    g.add_argument("--camera", default=None, help="camera JSON (focal, width, height, 3x4 pose)")
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--focal", type=float, default=None, help="default: 0.7 * width")
    g.add_argument("--camera-distance", type=float, default=0.6)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxmarch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a scene to a PPM image")
    _add_scene_flags(p)
    _add_camera_flags(p)
    _add_marching_flags(p)
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--no-grid", action="store_true", help="march uniformly, no skipping or filtering")
    p.add_argument("--velocity", type=float, nargs=3, default=None, help="render a moving scene at --time")
    p.add_argument("--time", type=float, default=0.0)
    p.add_argument("--save-grid", default=None)
    p.add_argument("--load-grid", default=None)

    p = sub.add_parser("bench", help="compare pruned against uniform marching")
    _add_scene_flags(p)
    _add_camera_flags(p)
    _add_marching_flags(p)
    p.set_defaults(width=128, height=128)

    p = sub.add_parser("train", help="fit a voxel field to renders of a target scene")
    _add_scene_flags(p)
    _add_marching_flags(p)
    p.add_argument("--n-views", type=int, default=20)
    p.add_argument("--eval-views", type=int, default=4)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--field-resolution", type=int, default=32)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--focal", type=float, default=None)
    p.add_argument("--camera-distance", type=float, default=0.6)
    p.add_argument("--batch-rays", type=int, default=1024)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--update-every", type=int, default=16)
    p.add_argument("--checkpoint", required=True, help="output .vxfd path")

    p = sub.add_parser("render-dynamic", help="render a moving scene with one shared grid")
    _add_scene_flags(p)
    _add_camera_flags(p)
    _add_marching_flags(p)
    p.add_argument("--velocity", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    p.add_argument("--timestamps", type=float, nargs="+", default=(0.0, 0.5, 1.0))
    p.add_argument("--output-dir", required=True)
    p.add_argument("--per-frame-grid", action="store_true",
                   help="build a separate grid per timestamp instead of the shared one")
    return parser


def make_domain(args) -> Aabb:
    return Aabb.cube(side=args.aabb_size)


def make_scene(args):
    domain = make_domain(args)
    name = args.scene
    kw = {}
    if args.sigma is not None:
        kw["sigma"] = args.sigma
    if name == "sphere":
        if args.radius is not None:
            kw["radius"] = args.radius
        if args.center is not None:
            kw["center"] = tuple(args.center)
        if args.rgb is not None:
            kw["rgb"] = tuple(args.rgb)
        return SolidSphere(**kw)
    if name == "box":
        kw.setdefault("sigma", 10.0)
        return UniformBox(domain, rgb=tuple(args.rgb) if args.rgb else (0.8, 0.8, 0.8), **kw)
    if name == "empty":
        return UniformBox(domain, sigma=0.0)
    if name == "checker":
        if args.period is not None:
            kw["period"] = args.period
        return Checker(**kw)
    if name.endswith(".vxfd") or os.path.isfile(name):
        try:
            return TrilinearVoxelField.load(name)
        except OSError as e:
            raise CliError(f"cannot read voxel checkpoint {name}: {e.strerror}") from e
    raise CliError(f"unknown scene {name!r} (expected one of {', '.join(SCENES)} or a .vxfd file)")


def make_contraction(args):
    if args.contraction == "sphere":
        return SphereContract((0.0, 0.0, 0.0), args.aabb_size / 2.0)
    return AabbNormalize(make_domain(args))


def make_config(args, contraction) -> MarchingConfig:
    step = args.step_size if args.step_size is not None else contraction.diagonal / 1024.0
    return MarchingConfig(step_size=step, early_stop_eps=args.early_stop_eps, alpha_thre=args.alpha_thre,
                          max_samples_per_ray=args.max_samples, unbounded_step_growth=args.step_growth)


def make_camera(args) -> PinholeCamera:
    if args.camera:
        try:
            with open(args.camera) as f:
                return PinholeCamera.from_json(f.read())
        except OSError as e:
            raise CliError(f"cannot read camera {args.camera}: {e.strerror}") from e
        except (KeyError, json.JSONDecodeError) as e:
            raise CliError(f"malformed camera file {args.camera}: {e}") from e
    focal = args.focal if args.focal is not None else 0.7 * args.width
    return PinholeCamera(look_at((0.0, 0.0, args.camera_distance), (0.0, 0.0, 0.0)), focal, args.width, args.height)


def _image(outputs, camera: PinholeCamera) -> np.ndarray:
    rgb = outputs.composite(1.0)
    if not np.all(np.isfinite(rgb)):
        raise CliError("rendered image contains NaN or infinite values")
    return to_uint8(rgb).reshape(camera.height, camera.width, 3)


def _ms(t0: float) -> float:
    return round((time.perf_counter() - t0) * 1e3, 3)


def _pruning(after: int, baseline: int) -> float:
    return 1.0 - after / baseline if baseline else 1.0


def cmd_render(args, rng) -> dict:
    field = make_scene(args)
    if args.velocity is not None:
        field = TimeConditionedField(field, tuple(args.velocity)).at(args.time)
    camera = make_camera(args)
    rays = generate_rays(camera, args.near_plane, args.far_plane)
    contraction = make_contraction(args)
    config = make_config(args, contraction)
    timing = {}

    grid = None
    if not args.no_grid:
        t0 = time.perf_counter()
        if args.load_grid:
            grid = OccupancyGrid.load(args.load_grid)
        else:
            grid = OccupancyGrid(contraction, args.grid_resolution)
            warm_up_grid(grid, field.query_density, args.grid_updates, rng, args.ema_decay)
        timing["grid_ms"] = _ms(t0)
        if args.save_grid:
            grid.save(args.save_grid)

    t0 = time.perf_counter()
    outputs, stats = render_rays(rays, field, grid, config, args.chunk)
    timing["render_ms"] = _ms(t0)
    write_ppm(args.output, _image(outputs, camera))

    baseline = uniform_sample_count(rays, config)
    return {
        "samples_emitted": stats.samples_emitted,
        "samples_after_filter": stats.samples_after_filter,
        "uniform_baseline_samples": baseline,
        "pruning_fraction": _pruning(stats.samples_after_filter, baseline),
        "occupied_fraction": grid.occupied_fraction() if grid is not None else 1.0,
        "image": args.output,
        "wall_time_ms": timing,
    }


def cmd_bench(args, rng) -> dict:
    field = make_scene(args)
    camera = make_camera(args)
    rays = generate_rays(camera, args.near_plane, args.far_plane)
    contraction = make_contraction(args)
    config = make_config(args, contraction)

    t0 = time.perf_counter()
    grid = OccupancyGrid(contraction, args.grid_resolution)
    warm_up_grid(grid, field.query_density, args.grid_updates, rng, args.ema_decay)
    grid_ms = _ms(t0)

    t0 = time.perf_counter()
    pruned, stats = render_rays(rays, field, grid, config, args.chunk)
    pruned_ms = _ms(t0)
    t0 = time.perf_counter()
    uniform, ustats = render_rays(rays, field, None, config, args.chunk)
    uniform_ms = _ms(t0)

    baseline = ustats.samples_after_filter
    return {
        "uniform_baseline_samples": baseline,
        "samples_emitted": stats.samples_emitted,
        "samples_after_filter": stats.samples_after_filter,
        "pruning_fraction": _pruning(stats.samples_after_filter, baseline),
        "grid_pruning_fraction": _pruning(stats.samples_emitted, baseline),
        "occupied_fraction": grid.occupied_fraction(),
        "max_abs_color_diff": float(np.max(np.abs(pruned.composite(1.0) - uniform.composite(1.0)), initial=0.0)),
        "wall_time_ms": {"grid": grid_ms, "pruned": pruned_ms, "uniform": uniform_ms},
    }


def cmd_train(args, rng) -> dict:
    target = make_scene(args)
    domain = make_domain(args)
    contraction = make_contraction(args)
    config = make_config(args, contraction)
    settings = TrainSettings(
        n_views=args.n_views, iterations=args.iterations, field_resolution=args.field_resolution,
        width=args.width, height=args.height, focal=args.focal, camera_radius=args.camera_distance,
        batch_rays=args.batch_rays, lr=args.lr, update_every=args.update_every, ema_decay=args.ema_decay,
        target_grid_updates=args.grid_updates, eval_views=args.eval_views,
        near=args.near_plane, far=args.far_plane,
    )
    if settings.iterations < 1:
        raise CliError("--iterations must be at least 1")
    if settings.n_views < 2:
        raise CliError("--n-views must be at least 2")
    t0 = time.perf_counter()
    result = train_voxel_field(target, domain, OccupancyGrid(contraction, args.grid_resolution), config, settings, rng)
    train_ms = _ms(t0)
    result.field.save(args.checkpoint)
    return {
        "iterations": len(result.losses),
        "loss": result.losses,
        "samples_after_filter": result.samples_per_iteration,
        "psnr_train": result.train_psnr,
        "psnr_eval": result.eval_psnr,
        "occupied_fraction": result.grid.occupied_fraction(),
        "checkpoint": args.checkpoint,
        "wall_time_ms": {"train": train_ms},
    }


def cmd_render_dynamic(args, rng) -> dict:
    base = make_scene(args)
    field = TimeConditionedField(base, tuple(args.velocity))
    camera = make_camera(args)
    rays = generate_rays(camera, args.near_plane, args.far_plane)
    contraction = make_contraction(args)
    config = make_config(args, contraction)
    os.makedirs(args.output_dir, exist_ok=True)
    timestamps = list(args.timestamps)

    # both modes draw one probe set per update round, so the shared grid is
    # exactly the cellwise union of the per-frame grids
    t0 = time.perf_counter()
    shared = OccupancyGrid(contraction, args.grid_resolution)
    per_frame = [shared.copy() for _ in timestamps] if args.per_frame_grid else []
    for _ in range(args.grid_updates):
        if per_frame:
            points = shared.probe_points(rng)
            for grid, t in zip(per_frame, timestamps):
                grid.update(field.at(t).query_density, args.ema_decay, points=points)
        else:
            shared.update_over_time(field.query_density, timestamps, args.ema_decay, rng)
    grid_ms = _ms(t0)

    frames = []
    t0 = time.perf_counter()
    for k, t in enumerate(timestamps):
        frozen = field.at(t)
        grid = per_frame[k] if per_frame else shared
        outputs, stats = render_rays(rays, frozen, grid, config, args.chunk)
        path = os.path.join(args.output_dir, f"frame_{k:03d}.ppm")
        write_ppm(path, _image(outputs, camera))
        frames.append({"time": t, "image": path, "samples_emitted": stats.samples_emitted,
                       "samples_after_filter": stats.samples_after_filter})
    baseline = uniform_sample_count(rays, config)
    total = sum(f["samples_after_filter"] for f in frames)
    return {
        "frames": frames,
        "uniform_baseline_samples": baseline * len(frames),
        "samples_after_filter": total,
        "pruning_fraction": _pruning(total, baseline * len(frames)),
        "occupied_fraction": (shared.occupied_fraction() if not per_frame
                              else [g.occupied_fraction() for g in per_frame]),
        "wall_time_ms": {"grid": grid_ms, "render": _ms(t0)},
    }


COMMANDS = {
    "render": cmd_render,
    "bench": cmd_bench,
    "train": cmd_train,
    "render-dynamic": cmd_render_dynamic,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    kernels.set_num_threads(args.threads)
    rng = np.random.default_rng(args.seed)
    try:
        body = COMMANDS[args.command](args, rng)
    except TrainingDiverged as e:
        print(f"voxmarch: error: training diverged at iteration {e.iteration}: {e}", file=sys.stderr)
        return 3
    except (CliError, ValueError, OSError) as e:
        print(f"voxmarch: error: {e}", file=sys.stderr)
        return 2
    if args.no_timing:
        body.pop("wall_time_ms", None)
    report = {"schema": SCHEMA, "command": args.command, **body}
    for key in ("pruning_fraction", "psnr_eval"):
        if isinstance(report.get(key), float) and math.isnan(report[key]):
            print(f"voxmarch: error: {key} is NaN", file=sys.stderr)
            return 2
    json.dump(report, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
