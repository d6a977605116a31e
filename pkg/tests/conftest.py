import math

import numpy as np
import pytest

from voxmarch.types import PackedSamples

# acceptance criteria append (name, passed, detail) here; summarized at the end of the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_packed(rng, max_rays=8, max_samples=16, allow_empty=True):
    """Random packed intervals: contiguous or gapped, strictly increasing per ray."""
    n_rays = int(rng.integers(1, max_rays + 1))
    counts = rng.integers(0 if allow_empty else 1, max_samples + 1, size=n_rays)
    starts, ends = [], []
    for c in counts:
        t = 0.2 + rng.random() * 0.1
        for _ in range(c):
            gap = rng.random() * 0.05 if rng.random() < 0.3 else 0.0
            d = 0.01 + rng.random() * 0.2
            starts.append(t + gap)
            ends.append(t + gap + d)
            t = t + gap + d
    return PackedSamples.from_counts(counts, np.array(starts), np.array(ends))


def brute_force_render(packed, sigmas, rgbs):
    """Double loop over rays and samples with the product form of transmittance."""
    n = packed.n_rays
    color = [[0.0, 0.0, 0.0] for _ in range(n)]
    opacity = [0.0] * n
    depth = [0.0] * n
    for r in range(n):
        off, cnt = int(packed.packed_info[r, 0]), int(packed.packed_info[r, 1])
        T = 1.0
        for i in range(off, off + cnt):
            delta = float(packed.t_ends[i] - packed.t_starts[i])
            alpha = 1.0 - math.exp(-float(sigmas[i]) * delta)
            w = T * alpha
            for c in range(3):
                color[r][c] += w * float(rgbs[i, c])
            opacity[r] += w
            depth[r] += w * 0.5 * float(packed.t_starts[i] + packed.t_ends[i])
            T *= 1.0 - alpha
    return np.array(color).reshape(n, 3), np.array(opacity), np.array(depth)


def fd_render_gradients(packed, rgbs, sigmas, g_color, g_opacity, g_depth, h=1e-4):
    """Central differences of ``render_forward`` for every sigma and rgb entry.

    All perturbed copies of the instance are packed into one batch so a
    single forward call evaluates every difference.
    """
    from voxmarch.rendering import SampleAttributes, render_forward

    n = packed.n_samples
    n_params = 4 * n
    copies = 2 * n_params
    reps = np.tile(np.c_[rgbs, sigmas], (copies, 1)).reshape(copies, n, 4)
    k = np.arange(n_params)
    reps[2 * k, k // 4, k % 4] += h
    reps[2 * k + 1, k // 4, k % 4] -= h
    big = PackedSamples.from_counts(
        np.tile(packed.counts, copies), np.tile(packed.t_starts, copies), np.tile(packed.t_ends, copies)
    )
    flat = reps.reshape(-1, 4)
    out = render_forward(big, SampleAttributes(flat[:, :3], flat[:, 3]))
    m = packed.n_rays
    loss = (
        (out.color.reshape(copies, m, 3) * g_color).sum(axis=(1, 2))
        + (out.opacity.reshape(copies, m) * g_opacity).sum(axis=1)
        + (out.depth.reshape(copies, m) * g_depth).sum(axis=1)
    )
    grad = ((loss[0::2] - loss[1::2]) / (2 * h)).reshape(n, 4)
    return grad[:, :3], grad[:, 3]


def grad_close(analytic, numeric, rel=1e-5, floor=1e-8):
    """Elementwise ``|a - n| <= rel * |n| + floor``; also returns the worst fraction of that budget used."""
    err = np.abs(np.asarray(analytic) - numeric)
    budget = rel * np.abs(numeric) + floor
    return bool(np.all(err <= budget)), float(np.max(err / budget, initial=0.0))


def random_voxel_instance(rng, max_res=8):
    from voxmarch.fields import TrilinearVoxelField
    from voxmarch.types import Aabb

    res = int(rng.integers(2, max_res + 1))
    lo = rng.uniform(-1.0, 0.0, 3)
    box = Aabb(lo, lo + rng.uniform(0.5, 2.0, 3))
    field = TrilinearVoxelField.random(res, box, rng, density_init=float(rng.normal()), scale=1.0)
    n = int(rng.integers(1, 12))
    # a few points outside the box exercise the zero branch
    pts = box.min_corner + rng.uniform(-0.1, 1.1, (n, 3)) * box.extent
    return field, pts, rng.normal(size=(n, 3)), rng.normal(size=n)


def fd_field_gradients(field, positions, d_rgbs, d_sigmas, h=1e-4):
    """Central differences of the full query chain w.r.t. every raw vertex parameter."""

    def loss():
        rgb, sigma = field.query_rgb_sigma(positions)
        return float(np.sum(rgb * d_rgbs) + np.sum(sigma * d_sigmas))

    out = {}
    for name, arr in field.params().items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + h
            up = loss()
            flat[k] = keep - h
            down = loss()
            flat[k] = keep
            gflat[k] = (up - down) / (2 * h)
        out[name] = g
    return out
