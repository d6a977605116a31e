"""Pinhole cameras (OpenGL convention: -z forward, +y up) and ray generation."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .types import RayBatch


@dataclass(frozen=True)
class PinholeCamera:
    pose: np.ndarray  # (3, 4) world-from-camera [R | t]
    focal: float
    width: int
    height: int

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64).reshape(3, 4)
        rot = pose[:, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6) or not np.isclose(np.linalg.det(rot), 1.0, atol=1e-6):
            raise ValueError("camera rotation must be orthonormal with determinant +1")
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        pose.setflags(write=False)
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:, :3]

    @property
    def position(self) -> np.ndarray:
        return self.pose[:, 3]

    def to_json(self) -> str:
        return json.dumps({
            "focal": self.focal,
            "width": self.width,
            "height": self.height,
            "pose": [float(v) for v in self.pose.reshape(-1)],
        })

    @classmethod
    def from_json(cls, text: str) -> "PinholeCamera":
        d = json.loads(text)
        pose = d["pose"]
        if len(pose) != 12:
            raise ValueError(f"camera pose must have 12 numbers, got {len(pose)}")
        return cls(np.asarray(pose, dtype=np.float64).reshape(3, 4), d["focal"], d["width"], d["height"])


def generate_rays(camera: PinholeCamera, near: float = 0.2, far: float = 1.0) -> RayBatch:
    """One ray per pixel center, row-major from the top-left pixel."""
    w, h = camera.width, camera.height
    if w <= 0 or h <= 0:
        raise ValueError(f"image must be non-empty, got {w}x{h}")
    i, j = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dirs = np.stack([
        (j + 0.5 - w / 2.0) / camera.focal,
        -(i + 0.5 - h / 2.0) / camera.focal,
        -np.ones_like(i),
    ], axis=-1).reshape(-1, 3)
    dirs = dirs @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position, dirs.shape)
    return RayBatch(origins, dirs, near, far)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-from-camera ``(3, 4)`` pose whose -z axis points from ``eye`` to ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    dist = np.linalg.norm(forward)
    if dist < 1e-12:
        raise ValueError("eye and target coincide")
    z = -forward / dist
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    norm = np.linalg.norm(x)
    if norm < 1e-9:
        raise ValueError("up vector is parallel to the viewing direction")
    x /= norm
    y = np.cross(z, x)
    return np.concatenate([np.stack([x, y, z], axis=1), eye[:, None]], axis=1)


def orbit_cameras(n: int, radius: float, focal: float, width: int, height: int,
                  elevation: float = 0.0, phase: float = 0.0, target=(0.0, 0.0, 0.0)) -> list:
    """``n`` cameras evenly spaced on a horizontal circle, all looking at ``target``."""
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for k in range(n):
        a = phase + 2.0 * np.pi * k / n
        eye = target + radius * np.array([
            np.cos(elevation) * np.sin(a), np.sin(elevation), np.cos(elevation) * np.cos(a),
        ])
        cams.append(PinholeCamera(look_at(eye, target), focal, width, height))
    return cams
