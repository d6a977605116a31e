"""End-to-end helpers shared by the CLI: grid warm-up, chunked rendering, images."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .marching import MarchingConfig, evaluate_sigmas, filter_packed, make_sigma_fn, march_candidates, march_uniform
from .occupancy import OccupancyGrid
from .rendering import SampleAttributes, render_forward
from .types import RayBatch, RenderOutputs

DEFAULT_CHUNK = 1 << 13


@dataclass
class RenderStats:
    samples_emitted: int = 0
    samples_after_filter: int = 0

    def __iadd__(self, other: "RenderStats") -> "RenderStats":
        self.samples_emitted += other.samples_emitted
        self.samples_after_filter += other.samples_after_filter
        return self


def uniform_sample_count(rays: RayBatch, config: MarchingConfig) -> int:
    """Samples :func:`march_uniform` would emit, without allocating them."""
    probe = RayBatch(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), rays.near, rays.far)
    return march_uniform(probe, config).n_samples * rays.n_rays


def warm_up_grid(grid: OccupancyGrid, density_fn, n_updates: int, rng: np.random.Generator,
                 ema_decay: float = 0.95) -> OccupancyGrid:
    for _ in range(n_updates):
        grid.update(density_fn, ema_decay, rng)
    return grid


def _render_chunk(rays: RayBatch, field, grid: Optional[OccupancyGrid], config: MarchingConfig):
    if grid is None:
        packed = march_uniform(rays, config)
        emitted = packed.n_samples
    else:
        candidates = march_candidates(rays, grid, config)
        emitted = candidates.n_samples
        sigmas = evaluate_sigmas(make_sigma_fn(rays, field.query_density), candidates)
        packed = filter_packed(candidates, sigmas, config)
    positions = packed.positions(rays)
    rgbs, sigmas = field.query_rgb_sigma(positions, rays.directions[packed.ray_indices])
    out = render_forward(packed, SampleAttributes(rgbs, sigmas))
    return out, RenderStats(emitted, packed.n_samples)


def render_rays(rays: RayBatch, field, grid: Optional[OccupancyGrid], config: MarchingConfig,
                chunk: int = DEFAULT_CHUNK) -> tuple[RenderOutputs, RenderStats]:
    """Render ``rays`` in chunks. ``grid=None`` marches uniformly with no filtering."""
    colors, opacities, depths = [], [], []
    stats = RenderStats()
    for lo in range(0, rays.n_rays, chunk):
        out, s = _render_chunk(rays.subset(slice(lo, lo + chunk)), field, grid, config)
        colors.append(out.color)
        opacities.append(out.opacity)
        depths.append(out.depth)
        stats += s
    if not colors:
        return RenderOutputs(np.zeros((0, 3)), np.zeros(0), np.zeros(0)), stats
    return RenderOutputs(np.concatenate(colors), np.concatenate(opacities), np.concatenate(depths)), stats


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    """Binary P6 bytes for an ``(h, w, 3)`` uint8 image."""
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def write_ppm(path, image: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", data)
    if m is None:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=m.end()).reshape(h, w, 3)


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - target) ** 2))
    return math.inf if mse == 0 else -10.0 * math.log10(mse)
