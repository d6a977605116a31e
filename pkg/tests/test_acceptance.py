"""Acceptance gate: one PASS/FAIL line per primary criterion.

Lines are printed as each test runs (visible with ``-s``) and repeated in
the terminal summary of every pytest run.
"""

import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from voxmarch import kernels
from voxmarch.camera import PinholeCamera, generate_rays, look_at
from voxmarch.cli import main
from voxmarch.contraction import AabbNormalize, contract_ball
from voxmarch.fields import SolidSphere, TimeConditionedField, UniformBox
from voxmarch.marching import MarchingConfig, make_sigma_fn, march, march_candidates, filter_packed
from voxmarch.occupancy import OccupancyGrid
from voxmarch.pipeline import read_ppm, render_rays
from voxmarch.rendering import SampleAttributes, render_backward, render_forward, transmittance
from voxmarch.types import Aabb, RayBatch, validate

from conftest import (
    ACCEPTANCE_LINES,
    brute_force_render,
    fd_field_gradients,
    fd_render_gradients,
    grad_close,
    random_packed,
    random_voxel_instance,
)

# pinned below the oracle run (seed 0: eval 31.41 dB, train 32.10 dB)
PSNR_THRESHOLD = 28.0


def gate(name, passed, detail):
    ACCEPTANCE_LINES.append((name, bool(passed), detail))
    print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    assert passed, f"{name}: {detail}"


def cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    assert code == 0, out.err
    return json.loads(out.out)


def _instances(seed, n):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        packed = random_packed(rng, max_rays=8, max_samples=16)
        k = packed.n_samples
        sigmas = rng.exponential(3.0, k) * (rng.random(k) > 0.2)
        yield rng, packed, rng.random((k, 3)), sigmas


def test_rendering_oracle_equivalence():
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    for _, packed, rgbs, sigmas in _instances(100, 1000):
        out = render_forward(packed, SampleAttributes(rgbs, sigmas))
        ref = brute_force_render(packed, sigmas, rgbs)
        for got, exp in zip((out.color, out.opacity, out.depth), ref):
            err = np.abs(got - exp) / np.maximum(np.abs(exp), 1e-300)
            worst = max(worst, float(np.max(np.where(exp == 0, np.abs(got), err), initial=0.0)))
        count += 1
    elapsed = time.perf_counter() - t0
    gate("rendering oracle equivalence", worst < 1e-6 and elapsed < 10.0,
         f"{count} instances, max rel err {worst:.2e} (< 1e-6), {elapsed:.2f} s (< 10 s)")


def test_gradient_correctness():
    t0 = time.perf_counter()
    ok_all, worst, n_render, n_field = True, 0.0, 0, 0
    for rng, packed, rgbs, sigmas in _instances(200, 200):
        m = packed.n_rays
        gc, go, gd = rng.normal(size=(m, 3)), rng.normal(size=m), rng.normal(size=m)
        grads = render_backward(packed, SampleAttributes(rgbs, sigmas), gc, go, gd)
        fd_rgb, fd_sigma = fd_render_gradients(packed, rgbs, sigmas, gc, go, gd)
        for a, b in ((grads.d_rgbs, fd_rgb), (grads.d_sigmas, fd_sigma)):
            ok, w = grad_close(a, b)
            ok_all &= ok
            worst = max(worst, w)
        n_render += 1
    rng = np.random.default_rng(201)
    for _ in range(200):
        field, pts, d_rgb, d_sig = random_voxel_instance(rng, max_res=8)
        analytic = field.field_backward(pts, d_rgb, d_sig)
        numeric = fd_field_gradients(field, pts, d_rgb, d_sig)
        for k in analytic:
            ok, w = grad_close(analytic[k], numeric[k])
            ok_all &= ok
            worst = max(worst, w)
        n_field += 1
    elapsed = time.perf_counter() - t0
    gate("gradient correctness", ok_all and elapsed < 60.0,
         f"{n_render} render + {n_field} field instances, worst error uses {worst:.3f} of the "
         f"1e-5 relative (1e-8 absolute floor) budget, {elapsed:.1f} s (< 60 s)")


def test_normalization_identity():
    worst = 0.0
    for _, packed, rgbs, sigmas in _instances(100, 1000):
        out = render_forward(packed, SampleAttributes(rgbs, sigmas))
        alpha = 1.0 - np.exp(-sigmas * packed.deltas)
        for r, (off, cnt) in enumerate(packed.packed_info):
            expected = 1.0 - np.prod(1.0 - alpha[off:off + cnt])
            worst = max(worst, abs(out.opacity[r] - expected) / max(expected, 1e-300) if expected else abs(out.opacity[r]))
    gate("normalization identity", worst < 1e-6, f"max rel err {worst:.2e} over 1000 instances (< 1e-6)")


def _sound_sphere_grid(sphere, res):
    grid = OccupancyGrid(AabbNormalize(Aabb.cube()), res)
    lo = grid.cell_coords() / res - 0.5
    closest = np.clip(np.asarray(sphere.center), lo, lo + 1.0 / res)
    touches = np.linalg.norm(closest - sphere.center, axis=1) <= sphere.radius * (1 + 1e-9)
    grid.set_density(np.where(touches, 1e6, 0.0))
    return grid


def test_conservative_pruning():
    sphere = SolidSphere()
    grid = _sound_sphere_grid(sphere, 128)
    cam = PinholeCamera(look_at((0, 0, 0.6), (0, 0, 0)), 0.7 * 64, 64, 64)
    rays = generate_rays(cam)
    cfg = MarchingConfig(alpha_thre=0.0, early_stop_eps=0.0)
    pruned, stats = render_rays(rays, sphere, grid, cfg)
    uniform, ustats = render_rays(rays, sphere, None, cfg)
    diff = float(np.max(np.abs(pruned.color - uniform.color)))
    gate("conservative pruning", diff <= 1e-5 and stats.samples_after_filter < ustats.samples_after_filter,
         f"max per-channel diff {diff:.2e} (<= 1e-5); {stats.samples_after_filter} vs "
         f"{ustats.samples_after_filter} uniform samples")


def test_threshold_semantics():
    domain = AabbNormalize(Aabb([-1, -1, 0], [1, 1, 1]))
    xy = np.random.default_rng(0).uniform(-0.3, 0.3, (64, 2))
    rays = RayBatch(np.c_[xy, np.zeros(64)], np.tile([0.0, 0.0, 1.0], (64, 1)), 0.2, 1.0)
    eps, thre = 1e-4, 1e-2
    cfg = MarchingConfig(step_size=0.01, early_stop_eps=eps, alpha_thre=thre)
    ok, n_trunc, worst_final, min_running, min_alpha = True, 0, 0.0, 1.0, 1.0
    for sigma in (1000.0, 100.0, 30.0):
        wall = UniformBox(Aabb([-1, -1, 0.4], [1, 1, 0.5]), sigma=sigma)
        grid = OccupancyGrid(domain, 10).update(wall.query_density)
        fn = make_sigma_fn(rays, wall.query_density)
        cand = march_candidates(rays, grid, cfg)
        sig_c = fn(cand.t_starts, cand.t_ends, cand.ray_indices)
        untruncated = filter_packed(cand, sig_c, MarchingConfig(0.01, 0.0, thre))
        p = march(rays, grid, fn, cfg)
        ok &= validate(p) is None
        sig = fn(p.t_starts, p.t_ends, p.ray_indices)
        alpha = -np.expm1(-sig * p.deltas)
        running = transmittance(p, sig) * (1 - alpha)  # transmittance after each kept sample
        last = p.packed_info[:, 0] + p.counts - 1
        non_final = np.ones(p.n_samples, bool)
        non_final[last[p.counts > 0]] = False
        truncated = p.counts < untruncated.counts
        final = running[last[truncated]]
        n_trunc += int(truncated.sum())
        if final.size:
            worst_final = max(worst_final, float(final.max()))
        if non_final.any():
            min_running = min(min_running, float(running[non_final].min()))
        if alpha.size:
            min_alpha = min(min_alpha, float(alpha.min()))
    ok &= n_trunc > 0 and worst_final < eps and min_running >= eps and min_alpha > thre
    gate("threshold semantics", ok,
         f"{n_trunc} truncated rays, max final T {worst_final:.2e} (< 1e-4), min running T of kept "
         f"non-final samples {min_running:.2e} (>= 1e-4), min kept alpha {min_alpha:.3g} (> 1e-2)")


def test_pruning_fraction(capsys):
    t0 = time.perf_counter()
    rep = cli(capsys, "bench", "--scene", "sphere", "--radius", 0.2, "--sigma", 200, "--width", 128,
              "--height", 128, "--grid-updates", 32, "--seed", 0)
    elapsed = time.perf_counter() - t0
    frac = rep["pruning_fraction"]
    gate("pruning fraction", frac >= 0.90 and elapsed < 30.0,
         f"pruning_fraction {frac:.4f} (>= 0.90), grid-only {rep['grid_pruning_fraction']:.4f}, "
         f"{elapsed:.1f} s at 128x128 (< 30 s)")


@pytest.mark.slow
def test_end_to_end_training(capsys, tmp_path):
    t0 = time.perf_counter()
    rep = cli(capsys, "train", "--scene", "sphere", "--field-resolution", 32, "--n-views", 20,
              "--width", 64, "--height", 64, "--iterations", 2000, "--seed", 0,
              "--checkpoint", tmp_path / "a.vxfd", "--no-timing")
    elapsed = time.perf_counter() - t0
    loss = np.array(rep["loss"])
    windows = [loss[k:k + 200] for k in range(0, len(loss), 200)]
    window_means = [w.mean() for w in windows]
    descending = all(w[-50:].mean() < w[:50].mean() for w in windows)
    monotone = all(b <= a for a, b in zip(window_means, window_means[1:]))
    # determinism: a second run with the same seed gives the same report and checkpoint
    short = ["train", "--scene", "sphere", "--field-resolution", 16, "--n-views", 8, "--width", 32,
             "--height", 32, "--iterations", 100, "--seed", 5, "--no-timing"]
    a = cli(capsys, *short, "--checkpoint", tmp_path / "s1.vxfd")
    b = cli(capsys, *short, "--checkpoint", tmp_path / "s2.vxfd")
    a.pop("checkpoint"), b.pop("checkpoint")
    same = a == b and (tmp_path / "s1.vxfd").read_bytes() == (tmp_path / "s2.vxfd").read_bytes()
    gate("end-to-end training", rep["psnr_eval"] > PSNR_THRESHOLD and descending and monotone and same
         and elapsed < 600,
         f"eval PSNR {rep['psnr_eval']:.2f} dB (> {PSNR_THRESHOLD}), train {rep['psnr_train']:.2f} dB; "
         f"window means non-increasing: {monotone}; last 50 < first 50 in every 200-iteration window: "
         f"{descending}; fixed seed reproducible: {same}; "
         f"{elapsed:.0f} s (< 600 s)")


def test_contraction_properties():
    rng = np.random.default_rng(300)
    u = rng.normal(size=(10000, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    cont = max(float(np.max(np.abs(contract_ball(u * s) - u))) for s in (1 - 1e-12, 1.0, 1 + 1e-12))
    # injectivity on pairs of random points spread over many scales
    x = rng.normal(size=(1500, 3)) * np.exp(rng.uniform(-4, 10, 1500))[:, None]
    y = contract_ball(x)
    dx = np.linalg.norm(x[:, None] - x[None], axis=-1)
    dy = np.linalg.norm(y[:, None] - y[None], axis=-1)
    injective = bool(np.all(dy[dx > 1e-6] > 0))
    # radial monotonicity on random rays, norms swept in [1e-3, 1e6]
    monotone = True
    for d in u[:50]:
        r = np.sort(np.exp(rng.uniform(math.log(1e-3), math.log(1e6), 2000)))
        yn = np.linalg.norm(contract_ball(r[:, None] * d), axis=1)
        monotone &= bool(np.all(np.diff(yn)[np.diff(r) > 0] > 0))
    sup = float(np.linalg.norm(contract_ball(rng.normal(size=(100000, 3)) * 1e12), axis=1).max())
    gate("contraction properties", cont < 1e-6 and injective and monotone and sup <= 2.0,
         f"continuity err {cont:.1e} (< 1e-6), injective {injective}, radially monotone {monotone}, "
         f"sup norm {sup!r} (<= 2)")


def test_dynamic_shared_grid(capsys, tmp_path):
    moving = TimeConditionedField(SolidSphere(radius=0.15, sigma=100.0), (0.3, 0.1, 0.0))
    times = [0.0, 0.25, 0.5, 0.75, 1.0]
    superset = True
    for seed in range(3):
        shared = OccupancyGrid(AabbNormalize(Aabb.cube()), 48)
        rng = np.random.default_rng(seed)
        for _ in range(4):
            shared.update_over_time(moving.query_density, times, rng=rng)
        for t in times:
            single = OccupancyGrid(AabbNormalize(Aabb.cube()), 48)
            rng = np.random.default_rng(seed)
            for _ in range(4):
                single.update(moving.at(t).query_density, rng=rng)
            superset &= bool(np.all(shared.occupancy_bits >= single.occupancy_bits))
    out = tmp_path / "frames"
    rep = cli(capsys, "render-dynamic", "--output-dir", out, "--timestamps", 0, 0.2, 0.5, 0.9, 1.0,
              "--width", 32, "--height", 32, "--grid-resolution", 64, "--no-timing")
    frames = [(out / f"frame_{k:03d}.ppm").read_bytes() for k in range(len(rep["frames"]))]
    identical = all(f == frames[0] for f in frames)
    gate("dynamic shared grid", superset and identical,
         f"shared occupancy is a cellwise superset of every single-time grid: {superset}; "
         f"static frames bit-identical: {identical}")


@pytest.mark.slow
@pytest.mark.skipif(kernels.BACKEND != "numba", reason="thread count only applies to the numba backend")
def test_thread_determinism(tmp_path):
    env = dict(os.environ, NUMBA_NUM_THREADS="4")
    small = ["--width", "48", "--height", "48", "--grid-resolution", "64", "--no-timing", "--seed", "11"]
    commands = {
        "render": ["render", "-o", "img.ppm", "--save-grid", "grid.ogrd", *small],
        "bench": ["bench", *small],
        "train": ["train", "--iterations", "40", "--n-views", "6", "--width", "32", "--height", "32",
                  "--field-resolution", "12", "--grid-resolution", "48", "--checkpoint", "f.vxfd",
                  "--no-timing", "--seed", "11"],
        "render-dynamic": ["render-dynamic", "--velocity", "0.2", "0", "0", "--output-dir", "frames", *small],
    }
    outputs = {}
    for threads in ("1", "4"):
        d = tmp_path / f"t{threads}"
        d.mkdir()
        blobs = {}
        for name, argv in commands.items():
            proc = subprocess.run([sys.executable, "-m", "voxmarch", *argv, "--threads", threads],
                                  cwd=d, env=env, capture_output=True, check=True)
            blobs[name] = proc.stdout
        for f in sorted(p for p in d.rglob("*") if p.is_file()):
            blobs[str(f.relative_to(d))] = f.read_bytes()
        outputs[threads] = blobs
    same = outputs["1"] == outputs["4"]
    probe = subprocess.run([sys.executable, "-c", "import numba; print(numba.config.NUMBA_NUM_THREADS)"],
                           env=env, capture_output=True, text=True, check=True).stdout.strip()
    gate("determinism across threads", same,
         f"{len(outputs['1'])} outputs (reports, images, grid, checkpoint, frames) byte-identical "
         f"for --threads 1 vs 4 (numba pool size {probe})")
