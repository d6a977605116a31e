"""Ray batches, bounding boxes and the packed (ragged) sample layout."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

INDEX_DTYPE = np.int32
INDEX_MAX = np.iinfo(INDEX_DTYPE).max


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Aabb:
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Aabb):
            return NotImplemented
        return bool(np.array_equal(self.as_array(), other.as_array()))

    def __hash__(self):
        return hash(self.as_array().tobytes())

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("aabb corners must be finite")
        if not np.all(hi > lo):
            raise ValueError(f"aabb max {hi} must exceed min {lo} on every axis")
        object.__setattr__(self, "min_corner", _frozen(lo))
        object.__setattr__(self, "max_corner", _frozen(hi))

    @classmethod
    def cube(cls, center=(0.0, 0.0, 0.0), side: float = 1.0) -> "Aabb":
        c = np.asarray(center, dtype=np.float64)
        return cls(c - side / 2, c + side / 2)

    @property
    def extent(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.min_corner, self.max_corner])


@dataclass(frozen=True)
class RayBatch:
    """Origins and unit directions of ``n_rays`` rays sharing one near/far range."""

    origins: np.ndarray
    directions: np.ndarray
    near: float = 0.2
    far: float = 1.0

    def __post_init__(self):
        o = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        if o.shape != d.shape:
            raise ValueError(f"origins {o.shape} and directions {d.shape} differ in shape")
        if not (np.all(np.isfinite(o)) and np.all(np.isfinite(d))):
            raise ValueError("rays must be finite")
        if len(d) and np.max(np.abs(np.linalg.norm(d, axis=1) - 1.0)) > 1e-6:
            raise ValueError("ray directions must be unit length")
        near, far = float(self.near), float(self.far)
        if not (0.0 <= near < far):
            raise ValueError(f"need 0 <= near < far, got near={near}, far={far}")
        if len(o) > INDEX_MAX:
            raise OverflowError(f"{len(o)} rays exceed the 32-bit index range")
        object.__setattr__(self, "origins", _frozen(o))
        object.__setattr__(self, "directions", _frozen(d))
        object.__setattr__(self, "near", near)
        object.__setattr__(self, "far", far)

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def n_rays(self) -> int:
        return len(self.origins)

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.directions[idx], self.near, self.far)


def pack(counts) -> tuple[np.ndarray, np.ndarray]:
    """Turn per-ray sample counts into ``packed_info`` and ``ray_indices``.

    ``packed_info[r] = (offset, count)`` where offsets are the exclusive
    prefix sum of the counts; ``ray_indices`` repeats ``r`` ``counts[r]`` times.
    """
    counts = np.asarray(counts, dtype=np.int64).reshape(-1)
    if np.any(counts < 0):
        raise ValueError("sample counts must be non-negative")
    total = int(counts.sum())
    if total > INDEX_MAX or len(counts) > INDEX_MAX:
        raise OverflowError(f"{total} samples exceed the 32-bit index range")
    offsets = np.zeros(len(counts), dtype=np.int64)
    np.cumsum(counts[:-1], out=offsets[1:])
    packed_info = np.stack([offsets, counts], axis=1).astype(INDEX_DTYPE).reshape(-1, 2)
    ray_indices = np.repeat(np.arange(len(counts), dtype=INDEX_DTYPE), counts)
    return packed_info, ray_indices


@dataclass(frozen=True)
class PackedSamples:
    """Flat sample intervals grouped into contiguous per-ray blocks.

    Construct through :meth:`from_counts` when building from scratch; the
    plain constructor takes arrays as-is so that :func:`validate` can inspect
    deliberately broken layouts.
    """

    packed_info: np.ndarray
    t_starts: np.ndarray
    t_ends: np.ndarray
    ray_indices: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "packed_info", _frozen(np.asarray(self.packed_info, dtype=INDEX_DTYPE).reshape(-1, 2))
        )
        object.__setattr__(self, "t_starts", _frozen(np.asarray(self.t_starts, dtype=np.float64).reshape(-1)))
        object.__setattr__(self, "t_ends", _frozen(np.asarray(self.t_ends, dtype=np.float64).reshape(-1)))
        object.__setattr__(self, "ray_indices", _frozen(np.asarray(self.ray_indices, dtype=INDEX_DTYPE).reshape(-1)))

    @classmethod
    def from_counts(cls, counts, t_starts, t_ends) -> "PackedSamples":
        packed_info, ray_indices = pack(counts)
        return cls(packed_info, t_starts, t_ends, ray_indices)

    @classmethod
    def empty(cls, n_rays: int) -> "PackedSamples":
        return cls.from_counts(np.zeros(n_rays, dtype=np.int64), np.zeros(0), np.zeros(0))

    @property
    def n_rays(self) -> int:
        return len(self.packed_info)

    @property
    def n_samples(self) -> int:
        return len(self.t_starts)

    @property
    def counts(self) -> np.ndarray:
        return self.packed_info[:, 1]

    @property
    def deltas(self) -> np.ndarray:
        return self.t_ends - self.t_starts

    @property
    def midpoints(self) -> np.ndarray:
        return (self.t_starts + self.t_ends) / 2.0

    def positions(self, rays: RayBatch) -> np.ndarray:
        """World-space sample points at the interval midpoints."""
        o = rays.origins[self.ray_indices]
        d = rays.directions[self.ray_indices]
        return o + d * self.midpoints[:, None]


def validate(packed: PackedSamples) -> Optional[str]:
    """Return ``None`` if ``packed`` is consistent, else the first violation found."""
    info = np.asarray(packed.packed_info, dtype=np.int64)
    n = len(packed.t_starts)
    starts, counts = info[:, 0], info[:, 1]
    if np.any(counts < 0):
        return "negative count"
    if not (int(counts.sum()) == n == len(packed.t_ends) == len(packed.ray_indices)):
        return "length mismatch"
    expected = np.zeros_like(starts)
    np.cumsum(counts[:-1], out=expected[1:])
    if not np.array_equal(starts, expected):
        return "offsets are not the exclusive prefix sum of counts"
    if not np.all(packed.t_ends > packed.t_starts):
        return "non-positive interval"
    if n > 1:
        same_ray = packed.ray_indices[1:] == packed.ray_indices[:-1]
        if np.any(same_ray & (packed.t_starts[1:] < packed.t_ends[:-1])):
            return "overlapping or non-increasing intervals"
    expanded = np.repeat(np.arange(len(counts)), counts)
    if not np.array_equal(expanded, packed.ray_indices):
        return "partition mismatch"
    return None


@dataclass(frozen=True)
class RenderOutputs:
    color: np.ndarray
    opacity: np.ndarray
    depth: np.ndarray

    def composite(self, background=1.0) -> np.ndarray:
        """Blend over a constant background, ``color + (1 - opacity) * bg``."""
        bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
        return self.color + (1.0 - self.opacity)[:, None] * bg
