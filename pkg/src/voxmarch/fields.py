"""Radiance fields usable as density/color callbacks.

Every field exposes ``query_density(positions)`` and
``query_rgb_sigma(positions, directions)``. Colors are view-independent;
``directions`` is accepted so fields plug into the interval callbacks
unchanged.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .types import Aabb


def _positions(positions) -> np.ndarray:
    p = np.asarray(positions, dtype=np.float64)
    if p.shape[-1:] != (3,):
        raise ValueError(f"positions must have a trailing axis of 3, got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite coordinate")
    return p.reshape(-1, 3)


def _rgb(value) -> np.ndarray:
    rgb = np.asarray(value, dtype=np.float64).reshape(3)
    if np.any(rgb < 0) or np.any(rgb > 1):
        raise ValueError(f"rgb components must lie in [0, 1], got {rgb}")
    return rgb


def _sigma(value) -> float:
    value = float(value)
    if not (np.isfinite(value) and value >= 0):
        raise ValueError(f"sigma must be finite and non-negative, got {value}")
    return value


class AnalyticField:
    """Base for closed-form fields: constant density on a support, fixed colors."""

    def density_at(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def color_at(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def query_density(self, positions) -> np.ndarray:
        return self.density_at(_positions(positions))

    def query_rgb_sigma(self, positions, directions=None):
        p = _positions(positions)
        sigma = self.density_at(p)
        rgb = np.where((sigma > 0)[:, None], self.color_at(p), 0.0)
        return rgb, sigma


@dataclass(frozen=True)
class UniformBox(AnalyticField):
    aabb: Aabb
    sigma: float = 1.0
    rgb: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "sigma", _sigma(self.sigma))
        object.__setattr__(self, "rgb", tuple(_rgb(self.rgb)))

    def density_at(self, p):
        inside = np.all((p >= self.aabb.min_corner) & (p <= self.aabb.max_corner), axis=1)
        return np.where(inside, self.sigma, 0.0)

    def color_at(self, p):
        return np.broadcast_to(np.asarray(self.rgb), p.shape)


@dataclass(frozen=True)
class SolidSphere(AnalyticField):
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.2
    sigma: float = 50.0
    rgb: tuple = (0.9, 0.3, 0.2)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", tuple(np.asarray(self.center, dtype=np.float64).reshape(3)))
        object.__setattr__(self, "sigma", _sigma(self.sigma))
        object.__setattr__(self, "rgb", tuple(_rgb(self.rgb)))

    def density_at(self, p):
        d = p - np.asarray(self.center)
        inside = np.sum(d * d, axis=1) <= self.radius * self.radius
        return np.where(inside, self.sigma, 0.0)

    def color_at(self, p):
        return np.broadcast_to(np.asarray(self.rgb), p.shape)


@dataclass(frozen=True)
class Checker(AnalyticField):
    """Constant density everywhere, colors alternating on a cubic lattice."""

    period: float = 0.25
    sigma: float = 1.0
    rgb_a: tuple = (1.0, 1.0, 1.0)
    rgb_b: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.period > 0:
            raise ValueError(f"period must be positive, got {self.period}")
        object.__setattr__(self, "sigma", _sigma(self.sigma))
        object.__setattr__(self, "rgb_a", tuple(_rgb(self.rgb_a)))
        object.__setattr__(self, "rgb_b", tuple(_rgb(self.rgb_b)))

    def density_at(self, p):
        return np.full(len(p), self.sigma)

    def color_at(self, p):
        parity = np.floor(p / self.period).astype(np.int64).sum(axis=1) % 2
        return np.where((parity == 0)[:, None], np.asarray(self.rgb_a), np.asarray(self.rgb_b))


@dataclass(frozen=True)
class TimeConditionedField:
    """A base field translated rigidly over time: ``f_t(x) = base(x - velocity * t)``."""

    base: object
    velocity: tuple = (0.0, 0.0, 0.0)

    def _shift(self, positions, t):
        return _positions(positions) - np.asarray(self.velocity, dtype=np.float64) * float(t)

    def query_density(self, positions, t: float = 0.0) -> np.ndarray:
        return self.base.query_density(self._shift(positions, t))

    def query_rgb_sigma(self, positions, directions=None, t: float = 0.0):
        return self.base.query_rgb_sigma(self._shift(positions, t), directions)

    def at(self, t: float) -> "_Frozen":
        """The field at a fixed time, as a static field."""
        return _Frozen(self, float(t))


@dataclass(frozen=True)
class _Frozen:
    field: TimeConditionedField
    t: float

    def query_density(self, positions):
        return self.field.query_density(positions, self.t)

    def query_rgb_sigma(self, positions, directions=None):
        return self.field.query_rgb_sigma(positions, directions, self.t)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    # relative precision holds in the negative tail, unlike 1 / (1 + exp(-x))
    return np.exp(-np.logaddexp(0.0, -np.asarray(x)))


VOXEL_MAGIC = b"VXFD"
VOXEL_VERSION = 1


class TrilinearVoxelField:
    """Dense grid of trainable vertex parameters with trilinear interpolation.

    ``resolution`` counts vertices per axis over ``aabb`` (so there are
    ``resolution - 1`` cells per axis). Raw values are interpolated first and
    activated after: ``sigma = softplus(raw_density)``, ``rgb = sigmoid(raw_color)``.
    Queries outside the box return zero density and zero color.
    """

    def __init__(self, resolution: int, aabb: Aabb, raw_density=None, raw_color=None):
        resolution = int(resolution)
        if resolution < 2:
            raise ValueError(f"voxel field needs at least 2 vertices per axis, got {resolution}")
        self.resolution = resolution
        self.aabb = aabb
        n = resolution**3
        self.raw_density = (np.zeros(n) if raw_density is None
                            else np.array(raw_density, dtype=np.float64).reshape(n))
        self.raw_color = (np.zeros((n, 3)) if raw_color is None
                          else np.array(raw_color, dtype=np.float64).reshape(n, 3))

    @classmethod
    def random(cls, resolution: int, aabb: Aabb, rng: np.random.Generator,
               density_init: float = 0.0, scale: float = 0.1) -> "TrilinearVoxelField":
        n = resolution**3
        return cls(resolution, aabb,
                   density_init + scale * rng.standard_normal(n),
                   scale * rng.standard_normal((n, 3)))

    @property
    def n_vertices(self) -> int:
        return self.resolution**3

    def params(self) -> dict:
        return {"raw_density": self.raw_density, "raw_color": self.raw_color}

    def _table(self) -> np.ndarray:
        table = np.empty((self.n_vertices, 4))
        table[:, 0] = self.raw_density
        table[:, 1:] = self.raw_color
        return table

    def interpolate(self, positions):
        """Raw ``(n, 4)`` interpolated parameters and the inside-box mask."""
        p = np.ascontiguousarray(_positions(positions))
        raw, inside = kernels.trilinear_forward(
            self.resolution, self.aabb.min_corner, self.aabb.max_corner, self._table(), p
        )
        return np.asarray(raw), np.asarray(inside, dtype=bool)

    def query_density(self, positions) -> np.ndarray:
        raw, inside = self.interpolate(positions)
        return np.where(inside, softplus(raw[:, 0]), 0.0)

    def query_rgb_sigma(self, positions, directions=None):
        raw, inside = self.interpolate(positions)
        sigma = np.where(inside, softplus(raw[:, 0]), 0.0)
        rgb = np.where(inside[:, None], sigmoid(raw[:, 1:]), 0.0)
        return rgb, sigma

    def field_backward(self, positions, d_rgbs, d_sigmas) -> dict:
        """Gradients on the raw vertex parameters for upstream ``d_rgbs``, ``d_sigmas``."""
        p = np.ascontiguousarray(_positions(positions))
        n = len(p)
        d_rgbs = np.asarray(d_rgbs, dtype=np.float64).reshape(-1, 3)
        d_sigmas = np.asarray(d_sigmas, dtype=np.float64).reshape(-1)
        if d_rgbs.shape[0] != n or d_sigmas.shape[0] != n:
            raise ValueError(f"{n} positions but {d_rgbs.shape[0]} rgb and {d_sigmas.shape[0]} sigma gradients")
        raw, inside = self.interpolate(p)
        grad = np.zeros((n, 4))
        grad[:, 0] = d_sigmas * sigmoid(raw[:, 0])
        s = sigmoid(raw[:, 1:])
        grad[:, 1:] = d_rgbs * s * (1.0 - s)
        grad[~inside] = 0.0
        table = np.asarray(kernels.trilinear_backward(
            self.resolution, self.aabb.min_corner, self.aabb.max_corner, p, grad, self.n_vertices
        ))
        return {"raw_density": table[:, 0].copy(), "raw_color": table[:, 1:].copy()}

    # checkpoint: header, then raw densities and raw colors (rgb interleaved per vertex)
    def to_bytes(self) -> bytes:
        header = VOXEL_MAGIC + struct.pack("<II", VOXEL_VERSION, self.resolution)
        header += struct.pack("<6d", *self.aabb.as_array())
        return header + self.raw_density.astype("<f4").tobytes() + self.raw_color.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TrilinearVoxelField":
        if blob[:4] != VOXEL_MAGIC:
            raise ValueError("not a voxel field checkpoint (bad magic)")
        version, res = struct.unpack_from("<II", blob, 4)
        if version != VOXEL_VERSION:
            raise ValueError(f"unsupported voxel checkpoint version {version}")
        box = struct.unpack_from("<6d", blob, 12)
        n = res**3
        pos = 12 + 48
        if len(blob) != pos + 16 * n:
            raise ValueError(f"voxel checkpoint has {len(blob)} bytes, expected {pos + 16 * n}")
        dens = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).astype(np.float64)
        color = np.frombuffer(blob, dtype="<f4", count=3 * n, offset=pos + 4 * n).astype(np.float64)
        return cls(res, Aabb(box[:3], box[3:]), dens, color.reshape(n, 3))

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TrilinearVoxelField":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())
