"""Ray marching with empty-space skipping and early ray termination."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from .occupancy import OccupancyGrid
from .types import PackedSamples, RayBatch

SigmaFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class MarchingConfig:
    """Step and threshold settings for :func:`march`.

    ``step_size`` defaults to 1/1024 of the unit cube's diagonal. Steps grow
    by ``unbounded_step_growth`` per step once a sample leaves the inner ball
    of a :class:`~voxmarch.contraction.SphereContract` grid.
    """

    step_size: float = math.sqrt(3.0) / 1024.0
    early_stop_eps: float = 1e-4
    alpha_thre: float = 1e-2
    max_samples_per_ray: int = 2048
    unbounded_step_growth: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.step_size) and self.step_size > 0):
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if not 0.0 <= self.early_stop_eps < 1.0:
            raise ValueError(f"early_stop_eps must lie in [0, 1), got {self.early_stop_eps}")
        if not 0.0 <= self.alpha_thre < 1.0:
            raise ValueError(f"alpha_thre must lie in [0, 1), got {self.alpha_thre}")
        if int(self.max_samples_per_ray) < 1:
            raise ValueError("max_samples_per_ray must be at least 1")
        if not self.unbounded_step_growth >= 1.0:
            raise ValueError("unbounded_step_growth must be >= 1")

    @classmethod
    def for_diagonal(cls, diagonal: float, **kwargs) -> "MarchingConfig":
        return cls(step_size=diagonal / 1024.0, **kwargs)


def _guard(rays: RayBatch, step: float) -> float:
    # residual intervals shorter than a few ulps of `far` are rounding noise
    return 8.0 * np.finfo(np.float64).eps * max(abs(rays.far), step)


def make_sigma_fn(rays: RayBatch, density_fn: Callable[[np.ndarray], np.ndarray]) -> SigmaFn:
    """Wrap a position -> density function into the interval callback form."""

    def sigma_fn(t_starts, t_ends, ray_indices):
        positions = rays.origins[ray_indices] + rays.directions[ray_indices] * ((t_starts + t_ends) / 2.0)[:, None]
        return density_fn(positions)

    return sigma_fn


def march_candidates(rays: RayBatch, grid: OccupancyGrid, config: MarchingConfig) -> PackedSamples:
    """Fixed-step intervals whose midpoints land in occupied cells."""
    ctype, cparams, res, bits = grid.kernel_args()
    counts, t_starts, t_ends = kernels.march_grid(
        rays.origins, rays.directions, rays.near, rays.far, _guard(rays, config.step_size),
        float(config.step_size), float(config.unbounded_step_growth), int(config.max_samples_per_ray),
        ctype, cparams, res, bits,
    )
    return PackedSamples.from_counts(counts, t_starts, t_ends)


def evaluate_sigmas(sigma_fn: SigmaFn, packed: PackedSamples) -> np.ndarray:
    sigmas = np.asarray(sigma_fn(packed.t_starts, packed.t_ends, packed.ray_indices), dtype=np.float64)
    sigmas = sigmas.reshape(-1) if sigmas.size == packed.n_samples else sigmas
    if sigmas.shape != (packed.n_samples,):
        raise ValueError(f"sigma_fn returned shape {sigmas.shape} for {packed.n_samples} samples")
    bad = ~np.isfinite(sigmas) | (sigmas < 0)
    if np.any(bad):
        s = int(np.argmax(bad))
        raise ValueError(f"sigma_fn returned invalid density {sigmas[s]!r} at sample {s} (ray {packed.ray_indices[s]})")
    return sigmas


def filter_packed(packed: PackedSamples, sigmas: np.ndarray, config: MarchingConfig) -> PackedSamples:
    """Drop low-opacity samples, then cut each ray once it is occluded.

    A sample is dropped when ``1 - exp(-sigma * delta) <= alpha_thre``.
    Transmittance is then accumulated over the surviving samples only; the
    first sample after which it falls below ``early_stop_eps`` is the last
    one kept on that ray.
    """
    if packed.n_samples == 0:
        return packed
    keep = kernels.filter_samples(
        packed.packed_info[:, 0].astype(np.int64), packed.counts.astype(np.int64),
        np.ascontiguousarray(packed.deltas), np.ascontiguousarray(sigmas, dtype=np.float64),
        float(config.alpha_thre), float(config.early_stop_eps),
    )
    keep = np.asarray(keep, dtype=bool)
    counts = np.bincount(packed.ray_indices[keep], minlength=packed.n_rays)
    return PackedSamples.from_counts(counts, packed.t_starts[keep], packed.t_ends[keep])


def march(rays: RayBatch, grid: OccupancyGrid, sigma_fn: SigmaFn, config: MarchingConfig = MarchingConfig()) -> PackedSamples:
    """Generate packed samples, skipping empty cells and occluded tails.

    ``sigma_fn(t_starts, t_ends, ray_indices)`` is called once on all
    candidate intervals; it must return one non-negative density per sample.
    """
    candidates = march_candidates(rays, grid, config)
    if candidates.n_samples == 0:
        return candidates
    sigmas = evaluate_sigmas(sigma_fn, candidates)
    return filter_packed(candidates, sigmas, config)


def march_uniform(rays: RayBatch, config: MarchingConfig = MarchingConfig()) -> PackedSamples:
    """Every fixed-step interval from near to far, no skipping or filtering."""
    step = float(config.step_size)
    guard = _guard(rays, step)
    n_steps = max(int(math.ceil((rays.far - rays.near) / step)) + 1, 1)
    k = np.arange(n_steps)
    starts = rays.near + k * step
    live = rays.far - starts > guard
    starts = starts[live]
    ends = np.minimum(rays.near + (k[live] + 1) * step, rays.far)
    n = rays.n_rays
    counts = np.full(n, len(starts), dtype=np.int64)
    return PackedSamples.from_counts(counts, np.tile(starts, n), np.tile(ends, n))
