"""Differentiable accumulation of per-sample attributes along rays.

For samples ``i`` on one ray with optical depths ``tau_i = sigma_i * delta_i``::

    T_i     = exp(-sum_{j<i} tau_j)
    alpha_i = 1 - exp(-tau_i)
    w_i     = T_i * alpha_i
    out     = sum_i w_i * v_i

Color, opacity and depth are the cases ``v = rgb``, ``v = 1`` and
``v = interval midpoint``. The backward pass is the closed form

    dL/dv_i     = w_i * g
    dL/dsigma_i = delta_i * (T_i (1 - alpha_i) s_i - sum_{j>i} w_j s_j),  s_i = <g, v_i>

evaluated with one reverse suffix-sum sweep per ray.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import kernels
from .types import PackedSamples, RenderOutputs


@dataclass(frozen=True)
class SampleAttributes:
    rgbs: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rgbs", np.asarray(self.rgbs, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "sigmas", np.asarray(self.sigmas, dtype=np.float64).reshape(-1))


@dataclass(frozen=True)
class RenderGradients:
    d_rgbs: np.ndarray
    d_sigmas: np.ndarray


def _segments(packed: PackedSamples):
    return packed.packed_info[:, 0].astype(np.int64), packed.counts.astype(np.int64)


def _check_sigmas(packed: PackedSamples, sigmas) -> np.ndarray:
    sigmas = np.ascontiguousarray(sigmas, dtype=np.float64).reshape(-1)
    if sigmas.shape[0] != packed.n_samples:
        raise ValueError(f"got {sigmas.shape[0]} densities for {packed.n_samples} samples")
    return sigmas


def _check_values(packed: PackedSamples, values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape[:1] != (packed.n_samples,):
        raise ValueError(f"got {values.shape[0] if values.ndim else 0} values for {packed.n_samples} samples")
    return np.ascontiguousarray(values.reshape(packed.n_samples, int(np.prod(values.shape[1:]))))


def _check_attrs(packed: PackedSamples, attrs: SampleAttributes, n_rays: Optional[int]):
    if n_rays is not None and n_rays != packed.n_rays:
        raise ValueError(f"n_rays={n_rays} but packing describes {packed.n_rays} rays")
    if attrs.rgbs.shape[0] != packed.n_samples or attrs.sigmas.shape[0] != packed.n_samples:
        raise ValueError(
            f"attributes ({attrs.rgbs.shape[0]} rgbs, {attrs.sigmas.shape[0]} sigmas) "
            f"do not match {packed.n_samples} samples"
        )


def _stack(packed: PackedSamples, attrs: SampleAttributes) -> np.ndarray:
    """Per-sample value rows ``[r, g, b, 1, t_mid]``."""
    n = packed.n_samples
    values = np.empty((n, 5))
    values[:, :3] = attrs.rgbs
    values[:, 3] = 1.0
    values[:, 4] = packed.midpoints
    return values


def transmittance(packed: PackedSamples, sigmas) -> np.ndarray:
    """Per-sample transmittance ``T_i`` (1 at the first sample of every ray)."""
    sigmas = _check_sigmas(packed, sigmas)
    offsets, counts = _segments(packed)
    _, _, trans = kernels.accumulate(offsets, counts, np.ascontiguousarray(packed.deltas), sigmas, np.zeros((packed.n_samples, 0)))
    return np.asarray(trans)


def render_weights(packed: PackedSamples, sigmas) -> np.ndarray:
    """Per-sample compositing weights ``T_i * alpha_i``."""
    sigmas = _check_sigmas(packed, sigmas)
    offsets, counts = _segments(packed)
    _, weights, _ = kernels.accumulate(offsets, counts, np.ascontiguousarray(packed.deltas), sigmas, np.zeros((packed.n_samples, 0)))
    return np.asarray(weights)


def render_attribute(packed: PackedSamples, sigmas, values, n_rays: Optional[int] = None) -> np.ndarray:
    """Accumulate arbitrary per-sample values; returns ``(n_rays,)`` or ``(n_rays, k)``."""
    sigmas = _check_sigmas(packed, sigmas)
    raw = np.asarray(values)
    flat = _check_values(packed, raw)
    if n_rays is not None and n_rays != packed.n_rays:
        raise ValueError(f"n_rays={n_rays} but packing describes {packed.n_rays} rays")
    offsets, counts = _segments(packed)
    out, _, _ = kernels.accumulate(offsets, counts, np.ascontiguousarray(packed.deltas), sigmas, flat)
    out = np.asarray(out)
    if raw.ndim == 1:
        return out[:, 0]
    return out.reshape((packed.n_rays,) + raw.shape[1:])


def render_forward(packed: PackedSamples, attrs: SampleAttributes, n_rays: Optional[int] = None) -> RenderOutputs:
    _check_attrs(packed, attrs, n_rays)
    offsets, counts = _segments(packed)
    out, _, _ = kernels.accumulate(offsets, counts, np.ascontiguousarray(packed.deltas), attrs.sigmas, _stack(packed, attrs))
    out = np.asarray(out)
    return RenderOutputs(color=out[:, :3], opacity=out[:, 3], depth=out[:, 4])


def render_backward(
    packed: PackedSamples,
    attrs: SampleAttributes,
    d_color=None,
    d_opacity=None,
    d_depth=None,
    n_rays: Optional[int] = None,
) -> RenderGradients:
    """Gradients of ``<d_color, color> + <d_opacity, opacity> + <d_depth, depth>``.

    Missing upstream gradients are treated as zero.
    """
    _check_attrs(packed, attrs, n_rays)
    m = packed.n_rays
    grad_out = np.zeros((m, 5))
    if d_color is not None:
        grad_out[:, :3] = np.asarray(d_color, dtype=np.float64).reshape(m, 3)
    if d_opacity is not None:
        grad_out[:, 3] = np.asarray(d_opacity, dtype=np.float64).reshape(m)
    if d_depth is not None:
        grad_out[:, 4] = np.asarray(d_depth, dtype=np.float64).reshape(m)
    offsets, counts = _segments(packed)
    d_values, d_sigmas = kernels.accumulate_backward(
        offsets, counts, np.ascontiguousarray(packed.deltas), attrs.sigmas, _stack(packed, attrs), grad_out
    )
    return RenderGradients(d_rgbs=np.asarray(d_values)[:, :3].copy(), d_sigmas=np.asarray(d_sigmas))


RgbSigmaFn = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple]


def rendering(rgb_sigma_fn: RgbSigmaFn, packed: PackedSamples) -> tuple[RenderOutputs, SampleAttributes]:
    """Query ``rgb_sigma_fn(t_starts, t_ends, ray_indices)`` and composite.

    Returns the outputs together with the queried attributes so callers can
    feed them to :func:`render_backward`.
    """
    rgbs, sigmas = rgb_sigma_fn(packed.t_starts, packed.t_ends, packed.ray_indices)
    attrs = SampleAttributes(rgbs, sigmas)
    return render_forward(packed, attrs), attrs
