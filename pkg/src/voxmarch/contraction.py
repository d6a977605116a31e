"""Maps from world space into the occupancy grid's unit cube.

Only grid lookups go through these maps; sample intervals stay in world
space. Two kinds are supported:

* :class:`AabbNormalize` -- affine ``(x - min) / (max - min)`` for bounded scenes.
* :class:`SphereContract` -- unbounded scenes. With ``u = (x - c) / r`` the
  contracted point is ``u`` inside the unit ball and
  ``(2 - 1/|u|) * u/|u|`` outside, so all of space lands in the ball of
  radius 2, which is then mapped to ``[0, 1]^3`` by ``(y + 2) / 4``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .types import Aabb

AABB_TAG = 0
SPHERE_TAG = 1

# largest contracted radius handed to the inverse map; keeps it finite
_MAX_CONTRACTED_RADIUS = 2.0 - 1e-6


@dataclass(frozen=True)
class AabbNormalize:
    aabb: Aabb

    tag = AABB_TAG

    def params(self) -> np.ndarray:
        return self.aabb.as_array()

    @property
    def diagonal(self) -> float:
        return self.aabb.diagonal


@dataclass(frozen=True)
class SphereContract:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0

    tag = SPHERE_TAG

    def __post_init__(self):
        c = tuple(float(v) for v in np.asarray(self.center, dtype=np.float64).reshape(3))
        if not np.all(np.isfinite(c)):
            raise ValueError("contraction center must be finite")
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ValueError(f"contraction radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", float(self.radius))

    def params(self) -> np.ndarray:
        return np.array([*self.center, self.radius, 0.0, 0.0])

    @property
    def diagonal(self) -> float:
        # diagonal of the box around the inner (uncontracted) ball
        return 2.0 * self.radius * np.sqrt(3.0)


ContractionKind = Union[AabbNormalize, SphereContract]


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite coordinate")


def contract_ball(u: np.ndarray) -> np.ndarray:
    """Contract normalized points ``u`` (..., 3) into the radius-2 ball."""
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    outside = n > 1.0
    safe = np.where(outside, n, 1.0)
    return np.where(outside, (2.0 - 1.0 / safe) * u / safe, u)


def uncontract_ball(y: np.ndarray) -> np.ndarray:
    """Inverse of :func:`contract_ball`; radii are clipped just below 2."""
    n = np.linalg.norm(y, axis=-1, keepdims=True)
    outside = n > 1.0
    n_safe = np.where(outside, n, 1.0)
    r_world = 1.0 / (2.0 - np.minimum(n_safe, _MAX_CONTRACTED_RADIUS))
    return np.where(outside, y * (r_world / n_safe), y)


def contract(kind: ContractionKind, x) -> np.ndarray:
    """World points (..., 3) to grid-domain coordinates."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    if isinstance(kind, AabbNormalize):
        return (x - kind.aabb.min_corner) / kind.aabb.extent
    u = (x - np.asarray(kind.center)) / kind.radius
    return (contract_ball(u) + 2.0) / 4.0


def uncontract(kind: ContractionKind, g) -> np.ndarray:
    """Grid-domain coordinates back to world points.

    For :class:`SphereContract` the corners of the unit cube fall outside
    the contracted ball; those are pulled radially onto a sphere just inside
    radius 2, i.e. very far away in world space.
    """
    g = np.asarray(g, dtype=np.float64)
    if isinstance(kind, AabbNormalize):
        return kind.aabb.min_corner + g * kind.aabb.extent
    y = 4.0 * g - 2.0
    return np.asarray(kind.center) + kind.radius * uncontract_ball(y)


def is_inside_domain(kind: ContractionKind, x) -> np.ndarray:
    g = contract(kind, x)
    return np.all((g >= 0.0) & (g <= 1.0), axis=-1)
