"""Time the numba kernels against the pure-numpy fallback on one workload.

    python benchmarks/bench_backends.py --width 128 --repeat 5

Both backends are loaded side by side (the VOXMARCH_BACKEND flag only picks
the default). Outputs are checked for agreement before timing is reported.
"""

import argparse
import time

import numpy as np

from voxmarch.camera import PinholeCamera, generate_rays, look_at
from voxmarch.contraction import AabbNormalize
from voxmarch.fields import SolidSphere, TrilinearVoxelField
from voxmarch.kernels import load_backend
from voxmarch.marching import MarchingConfig, make_sigma_fn, march
from voxmarch.occupancy import OccupancyGrid
from voxmarch.pipeline import warm_up_grid
from voxmarch.types import Aabb


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def workload(width, seed):
    rng = np.random.default_rng(seed)
    sphere = SolidSphere(radius=0.2, sigma=50.0)
    grid = warm_up_grid(OccupancyGrid(AabbNormalize(Aabb.cube()), 128), sphere.query_density, 8, rng)
    rays = generate_rays(PinholeCamera(look_at((0, 0, 0.6), (0, 0, 0)), 0.7 * width, width, width))
    cfg = MarchingConfig()
    packed = march(rays, grid, make_sigma_fn(rays, sphere.query_density), cfg)
    field = TrilinearVoxelField.random(32, Aabb.cube(), rng, density_init=1.0)
    return rays, grid, cfg, packed, field, rng


def kernel_calls(rays, grid, cfg, packed, field, rng):
    offsets = packed.packed_info[:, 0].astype(np.int64)
    counts = packed.counts.astype(np.int64)
    deltas = np.ascontiguousarray(packed.deltas)
    sigmas = rng.exponential(50.0, packed.n_samples)
    values = rng.random((packed.n_samples, 5))
    grad = rng.normal(size=(packed.n_rays, 5))
    positions = np.ascontiguousarray(packed.positions(rays))
    table = field._table()
    lo, hi = field.aabb.min_corner, field.aabb.max_corner
    point_grad = rng.normal(size=(packed.n_samples, 4))
    march_args = (rays.origins, rays.directions, rays.near, rays.far, 1e-15, cfg.step_size, 1.0,
                  cfg.max_samples_per_ray, *grid.kernel_args())
    return {
        "march_grid": lambda k: k.march_grid(*march_args),
        "filter_samples": lambda k: k.filter_samples(offsets, counts, deltas, sigmas, 1e-2, 1e-4),
        "accumulate": lambda k: k.accumulate(offsets, counts, deltas, sigmas, values),
        "accumulate_backward": lambda k: k.accumulate_backward(offsets, counts, deltas, sigmas, values, grad),
        "trilinear_forward": lambda k: k.trilinear_forward(field.resolution, lo, hi, table, positions),
        "trilinear_backward": lambda k: k.trilinear_backward(field.resolution, lo, hi, positions, point_grad,
                                                             field.n_vertices),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--width", type=int, default=128, help="square image side (rays = width^2)")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    try:
        fast = load_backend("numba")
    except ImportError:
        raise SystemExit("numba is not installed; nothing to compare against")
    slow = load_backend("numpy")

    rays, grid, cfg, packed, field, rng = workload(args.width, args.seed)
    calls = kernel_calls(rays, grid, cfg, packed, field, rng)
    print(f"{rays.n_rays} rays, {packed.n_samples} samples after filtering")
    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  agree")
    for name, call in calls.items():
        call(fast)  # compile outside the timed region
        t_fast, a = best_of(lambda: call(fast), args.repeat)
        t_slow, b = best_of(lambda: call(slow), args.repeat)
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        agree = all(np.allclose(np.asarray(x), np.asarray(y), rtol=1e-10, atol=1e-12) for x, y in zip(a, b))
        print(f"{name:<22}{t_fast * 1e3:>10.2f}{t_slow * 1e3:>10.2f}{t_slow / t_fast:>8.1f}x  {agree}")


if __name__ == "__main__":
    main()
