"""Fit a trilinear voxel field to renders of a target scene.

Each iteration marches a random minibatch of rays through the current
occupancy grid (densities from the field being trained), composites over a
white background, takes the MSE against ground truth and back-propagates
through the renderer and the field by hand before an Adam step. The grid is
refreshed from the field every ``update_every`` iterations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .camera import PinholeCamera, generate_rays, orbit_cameras
from .fields import TrilinearVoxelField
from .marching import MarchingConfig, make_sigma_fn, march
from .occupancy import OccupancyGrid
from .optim import Adam
from .pipeline import psnr, render_rays, warm_up_grid
from .rendering import SampleAttributes, render_backward, render_forward
from .types import Aabb, RayBatch


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"loss became {loss} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainSettings:
    n_views: int = 20
    iterations: int = 2000
    field_resolution: int = 32
    width: int = 64
    height: int = 64
    focal: Optional[float] = None
    camera_radius: float = 0.6
    elevation: float = 0.25
    batch_rays: int = 1024
    lr: float = 0.1
    update_every: int = 16
    ema_decay: float = 0.95
    target_grid_updates: int = 32
    density_init: float = 7.0
    eval_views: int = 4
    near: float = 0.2
    far: float = 1.0


@dataclass
class TrainResult:
    field: TrilinearVoxelField
    grid: OccupancyGrid
    losses: list = dc_field(default_factory=list)
    train_psnr: float = float("nan")
    eval_psnr: float = float("nan")
    samples_per_iteration: list = dc_field(default_factory=list)


def _cameras(s: TrainSettings, n: int, phase: float) -> list:
    focal = s.focal if s.focal is not None else 0.7 * s.width
    return orbit_cameras(n, s.camera_radius, focal, s.width, s.height, elevation=s.elevation, phase=phase)


def _stack_rays(cams: list[PinholeCamera], near: float, far: float) -> RayBatch:
    batches = [generate_rays(c, near, far) for c in cams]
    return RayBatch(np.concatenate([b.origins for b in batches]),
                    np.concatenate([b.directions for b in batches]), near, far)


def ground_truth(target, rays: RayBatch, grid: OccupancyGrid, config: MarchingConfig) -> np.ndarray:
    out, _ = render_rays(rays, target, grid, config)
    return out.composite(1.0)


def train_voxel_field(
    target,
    domain: Aabb,
    grid: OccupancyGrid,
    config: MarchingConfig,
    settings: TrainSettings,
    rng: np.random.Generator,
) -> TrainResult:
    """Optimize a voxel field over ``domain``; ``grid`` is an empty grid to train with."""
    s = settings
    if s.iterations < 1:
        raise ValueError("iterations must be at least 1")
    if s.n_views < 2:
        raise ValueError("need at least 2 training views")

    target_grid = warm_up_grid(grid.copy(), target.query_density, s.target_grid_updates, rng, s.ema_decay)
    train_rays = _stack_rays(_cameras(s, s.n_views, 0.0), s.near, s.far)
    eval_rays = _stack_rays(_cameras(s, s.eval_views, math.pi / s.n_views), s.near, s.far)
    train_gt = ground_truth(target, train_rays, target_grid, config)
    eval_gt = ground_truth(target, eval_rays, target_grid, config)

    voxels = TrilinearVoxelField.random(s.field_resolution, domain, rng, density_init=s.density_init)
    grid.update(voxels.query_density, s.ema_decay, rng)
    adam = Adam(lr=s.lr)
    result = TrainResult(voxels, grid)
    batch = min(s.batch_rays, train_rays.n_rays)

    for it in range(s.iterations):
        idx = np.sort(rng.choice(train_rays.n_rays, size=batch, replace=False))
        rays = train_rays.subset(idx)
        packed = march(rays, grid, make_sigma_fn(rays, voxels.query_density), config)
        positions = packed.positions(rays)
        rgbs, sigmas = voxels.query_rgb_sigma(positions)
        attrs = SampleAttributes(rgbs, sigmas)
        out = render_forward(packed, attrs)
        err = out.composite(1.0) - train_gt[idx]
        loss = float(np.mean(err * err))
        if not math.isfinite(loss):
            raise TrainingDiverged(it, loss)
        result.losses.append(loss)
        result.samples_per_iteration.append(packed.n_samples)

        d_color = 2.0 * err / err.size
        grads = render_backward(packed, attrs, d_color=d_color, d_opacity=-d_color.sum(axis=1))
        adam.step(voxels.params(), voxels.field_backward(positions, grads.d_rgbs, grads.d_sigmas))

        if (it + 1) % s.update_every == 0:
            grid.update(voxels.query_density, s.ema_decay, rng)

    train_out, _ = render_rays(train_rays, voxels, grid, config)
    eval_out, _ = render_rays(eval_rays, voxels, grid, config)
    result.train_psnr = psnr(train_out.composite(1.0), train_gt)
    result.eval_psnr = psnr(eval_out.composite(1.0), eval_gt)
    return result
