"""Cached binary occupancy over a cubic lattice in the contracted domain."""

from __future__ import annotations

import struct
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .contraction import AABB_TAG, SPHERE_TAG, AabbNormalize, ContractionKind, SphereContract, uncontract
from .types import Aabb

MAGIC = b"OGRD"
VERSION = 1
_PROBE_CHUNK = 1 << 18


class OccupancyGrid:
    """Occupancy bitfield plus the density cache it is derived from.

    Cells are stored flat in x-fastest order, ``x + res * (y + res * z)``.
    A cell is occupied when a reference step through its cached density has
    opacity above ``alpha_threshold``::

        1 - exp(-density_cache * reference_step) > alpha_threshold
    """

    def __init__(
        self,
        contraction: ContractionKind,
        resolution: int = 128,
        alpha_threshold: float = 1e-2,
        reference_step: Optional[float] = None,
    ):
        resolution = int(resolution)
        if resolution < 1:
            raise ValueError(f"resolution must be positive, got {resolution}")
        if not 0.0 < alpha_threshold < 1.0:
            raise ValueError(f"alpha_threshold must lie in (0, 1), got {alpha_threshold}")
        if reference_step is None:
            reference_step = contraction.diagonal / 1024.0
        if not reference_step > 0:
            raise ValueError(f"reference_step must be positive, got {reference_step}")
        self.contraction = contraction
        self.resolution = resolution
        self.alpha_threshold = float(alpha_threshold)
        self.reference_step = float(reference_step)
        self.density_cache = np.zeros(resolution**3, dtype=np.float64)
        self.occupancy_bits = np.zeros(resolution**3, dtype=bool)
        self._coords = None

    @property
    def n_cells(self) -> int:
        return self.resolution**3

    @property
    def threshold_density(self) -> float:
        """Smallest cached density that counts as occupied (exclusive)."""
        return float(-np.log1p(-self.alpha_threshold) / self.reference_step)

    def _refresh_bits(self) -> None:
        alpha = -np.expm1(-self.density_cache * self.reference_step)
        self.occupancy_bits = alpha > self.alpha_threshold

    def set_density(self, values) -> None:
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.shape != (self.n_cells,):
            raise ValueError(f"expected {self.n_cells} cell densities, got {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("cell densities must be finite and non-negative")
        self.density_cache = values.copy()
        self._refresh_bits()

    def kernel_args(self):
        """``(ctype, cparams, resolution, bits)`` as consumed by the marching kernels."""
        return (
            int(self.contraction.tag),
            np.ascontiguousarray(self.contraction.params(), dtype=np.float64),
            self.resolution,
            self.occupancy_bits.view(np.uint8),
        )

    def query(self, x) -> np.ndarray:
        """Occupancy at world points ``x`` (..., 3); outside the domain is empty."""
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite coordinate")
        shape = x.shape[:-1]
        ctype, cparams, res, bits = self.kernel_args()
        hits = kernels.grid_lookup(ctype, cparams, res, bits, np.ascontiguousarray(x.reshape(-1, 3)))
        return np.asarray(hits, dtype=bool).reshape(shape)

    def cell_coords(self) -> np.ndarray:
        """Integer ``(ix, iy, iz)`` for every cell, in storage order."""
        if self._coords is None:
            z, y, x = np.indices((self.resolution,) * 3, dtype=np.int32).reshape(3, -1)
            self._coords = np.stack([x, y, z], axis=1)
            self._coords.setflags(write=False)
        return self._coords

    def probe_points(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """One world-space probe per cell.

        With ``rng`` the probe is uniform inside the cell (in grid-domain
        coordinates, then mapped back through the contraction); without it
        the cell center is used.
        """
        idx = self.cell_coords().astype(np.float64)
        if rng is None:
            offset = 0.5
        else:
            offset = rng.random(idx.shape)
        return uncontract(self.contraction, (idx + offset) / self.resolution)

    def _probe(self, fn: Callable, points: np.ndarray, label: str) -> np.ndarray:
        out = np.empty(len(points))
        for lo in range(0, len(points), _PROBE_CHUNK):
            chunk = np.asarray(fn(points[lo:lo + _PROBE_CHUNK]), dtype=np.float64).reshape(-1)
            if chunk.shape[0] != min(_PROBE_CHUNK, len(points) - lo):
                raise ValueError(f"{label} returned {chunk.shape[0]} values for {len(points[lo:lo + _PROBE_CHUNK])} points")
            out[lo:lo + len(chunk)] = chunk
        bad = ~np.isfinite(out) | (out < 0)
        if np.any(bad):
            cell = int(np.argmax(bad))
            ix, iy, iz = self.cell_coords()[cell]
            raise ValueError(f"{label} returned {out[cell]!r} for cell ({ix}, {iy}, {iz})")
        return out

    def _fold(self, probed: np.ndarray, ema_decay: float) -> None:
        if not 0.0 <= ema_decay <= 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1], got {ema_decay}")
        self.density_cache = np.maximum(self.density_cache * ema_decay, probed)
        self._refresh_bits()

    def update(
        self,
        density_fn: Callable[[np.ndarray], np.ndarray],
        ema_decay: float = 0.95,
        rng: Optional[np.random.Generator] = None,
        points: Optional[np.ndarray] = None,
    ) -> "OccupancyGrid":
        """Probe ``density_fn`` once per cell and fold it into the cache.

        ``points`` (from :meth:`probe_points`) overrides the probe draw so
        several grids can share one set of probes.
        """
        if points is None:
            points = self.probe_points(rng)
        probed = self._probe(density_fn, points, "density_fn")
        self._fold(probed, ema_decay)
        return self

    def update_over_time(
        self,
        density_fn_t: Callable[[np.ndarray, float], np.ndarray],
        timestamps: Sequence[float],
        ema_decay: float = 0.95,
        rng: Optional[np.random.Generator] = None,
    ) -> "OccupancyGrid":
        """Like :meth:`update`, but each cell keeps its densest timestamp.

        The same probe points are reused for every timestamp.
        """
        timestamps = list(timestamps)
        if not timestamps:
            raise ValueError("timestamps must be non-empty")
        points = self.probe_points(rng)
        probed = None
        for t in timestamps:
            d = self._probe(lambda p: density_fn_t(p, t), points, f"density_fn_t at t={t}")
            probed = d if probed is None else np.maximum(probed, d)
        self._fold(probed, ema_decay)
        return self

    def occupied_fraction(self) -> float:
        return float(np.count_nonzero(self.occupancy_bits)) / self.n_cells

    def copy(self) -> "OccupancyGrid":
        other = OccupancyGrid(self.contraction, self.resolution, self.alpha_threshold, self.reference_step)
        other.density_cache = self.density_cache.copy()
        other.occupancy_bits = self.occupancy_bits.copy()
        return other

    # serialization: header, f32 density cache, then bits packed LSB-first
    def to_bytes(self) -> bytes:
        c = self.contraction
        header = MAGIC + struct.pack("<IIB", VERSION, self.resolution, c.tag)
        if isinstance(c, AabbNormalize):
            header += struct.pack("<6d", *c.aabb.as_array())
        else:
            header += struct.pack("<4d", *c.center, c.radius)
        header += struct.pack("<dd", self.alpha_threshold, self.reference_step)
        cache = self.density_cache.astype("<f4").tobytes()
        bits = np.packbits(self.occupancy_bits, bitorder="little").tobytes()
        return header + cache + bits

    @classmethod
    def from_bytes(cls, blob: bytes) -> "OccupancyGrid":
        if blob[:4] != MAGIC:
            raise ValueError("not an occupancy grid blob (bad magic)")
        version, res, tag = struct.unpack_from("<IIB", blob, 4)
        if version != VERSION:
            raise ValueError(f"unsupported occupancy grid version {version}")
        pos = 13
        if tag == AABB_TAG:
            p = struct.unpack_from("<6d", blob, pos)
            pos += 48
            contraction: ContractionKind = AabbNormalize(Aabb(p[:3], p[3:]))
        elif tag == SPHERE_TAG:
            p = struct.unpack_from("<4d", blob, pos)
            pos += 32
            contraction = SphereContract(p[:3], p[3])
        else:
            raise ValueError(f"unknown contraction tag {tag}")
        alpha_threshold, reference_step = struct.unpack_from("<dd", blob, pos)
        pos += 16
        grid = cls(contraction, res, alpha_threshold, reference_step)
        n = grid.n_cells
        n_bytes = (n + 7) // 8
        if len(blob) != pos + 4 * n + n_bytes:
            raise ValueError(f"occupancy grid blob has {len(blob)} bytes, expected {pos + 4 * n + n_bytes}")
        grid.density_cache = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).astype(np.float64)
        packed = np.frombuffer(blob, dtype=np.uint8, count=n_bytes, offset=pos + 4 * n)
        grid.occupancy_bits = np.unpackbits(packed, count=n, bitorder="little").astype(bool)
        return grid

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "OccupancyGrid":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())
