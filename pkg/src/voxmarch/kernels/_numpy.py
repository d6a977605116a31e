"""Vectorized numpy versions of the loop kernels.

Same signatures and arithmetic as the numba kernels. Per-ray scans go
through zero-padded ``(rays, max_count)`` blocks so that ``np.cumsum`` along
rows reproduces the sequential accumulation order; blocks are chunked to
bound memory.
"""

import numpy as np

SPHERE_TAG = 1
_BLOCK_ELEMS = 1 << 22


def _cell_index(ctype, cp, res, px, py, pz):
    if ctype == SPHERE_TAG:
        ux = (px - cp[0]) / cp[3]
        uy = (py - cp[1]) / cp[3]
        uz = (pz - cp[2]) / cp[3]
        n = np.sqrt(ux * ux + uy * uy + uz * uz)
        out = n > 1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(out, (2.0 - 1.0 / n) / n, 1.0)
        ux = np.where(out, ux * s, ux)
        uy = np.where(out, uy * s, uy)
        uz = np.where(out, uz * s, uz)
        gx = (ux + 2.0) / 4.0
        gy = (uy + 2.0) / 4.0
        gz = (uz + 2.0) / 4.0
    else:
        gx = (px - cp[0]) / (cp[3] - cp[0])
        gy = (py - cp[1]) / (cp[4] - cp[1])
        gz = (pz - cp[2]) / (cp[5] - cp[2])
    inside = (gx >= 0.0) & (gx <= 1.0) & (gy >= 0.0) & (gy <= 1.0) & (gz >= 0.0) & (gz <= 1.0)
    with np.errstate(invalid="ignore"):
        ix = np.minimum(np.floor(np.where(inside, gx, 0.0) * res).astype(np.int64), res - 1)
        iy = np.minimum(np.floor(np.where(inside, gy, 0.0) * res).astype(np.int64), res - 1)
        iz = np.minimum(np.floor(np.where(inside, gz, 0.0) * res).astype(np.int64), res - 1)
    return np.where(inside, ix + res * (iy + res * iz), -1)


def grid_lookup(ctype, cparams, res, bits, points):
    c = _cell_index(ctype, cparams, res, points[:, 0], points[:, 1], points[:, 2])
    return (c >= 0) & (bits[np.maximum(c, 0)] != 0)


def march_grid(origins, dirs, near, far, guard, step, growth, max_samples, ctype, cparams, res, bits):
    n_rays = origins.shape[0]
    base = np.full(n_rays, near)
    j = np.zeros(n_rays, dtype=np.int64)
    dt = np.full(n_rays, step)
    counts = np.zeros(n_rays, dtype=np.int64)
    active = np.arange(n_rays)
    grow = ctype == SPHERE_TAG and growth > 1.0
    ray_chunks, s_chunks, e_chunks = [], [], []
    while active.size:
        active = active[counts[active] < max_samples]
        t0 = base[active] + j[active] * dt[active]
        live = far - t0 > guard
        active, t0 = active[live], t0[live]
        if not active.size:
            break
        t1 = np.minimum(base[active] + (j[active] + 1) * dt[active], far)
        mid = (t0 + t1) / 2.0
        px = origins[active, 0] + dirs[active, 0] * mid
        py = origins[active, 1] + dirs[active, 1] * mid
        pz = origins[active, 2] + dirs[active, 2] * mid
        c = _cell_index(ctype, cparams, res, px, py, pz)
        hit = (c >= 0) & (bits[np.maximum(c, 0)] != 0)
        ray_chunks.append(active[hit])
        s_chunks.append(t0[hit])
        e_chunks.append(t1[hit])
        counts[active[hit]] += 1
        j[active] += 1
        if grow:
            ux = (px - cparams[0]) / cparams[3]
            uy = (py - cparams[1]) / cparams[3]
            uz = (pz - cparams[2]) / cparams[3]
            outside = ux * ux + uy * uy + uz * uz > 1.0
            moved = active[outside]
            base[moved] = t1[outside]
            j[moved] = 0
            dt[moved] = dt[moved] * growth
    if not ray_chunks:
        return counts, np.zeros(0), np.zeros(0)
    rays = np.concatenate(ray_chunks)
    order = np.argsort(rays, kind="stable")
    return counts, np.concatenate(s_chunks)[order], np.concatenate(e_chunks)[order]


def _ray_blocks(offsets, counts):
    """Yield ``(valid, flat)`` ray chunks; ``flat[r, col]`` is a sample index where ``valid``."""
    n_rays = len(offsets)
    if n_rays == 0:
        return
    widest = max(int(counts.max()), 1)
    per_block = max(1, _BLOCK_ELEMS // widest)
    for lo in range(0, n_rays, per_block):
        rays = np.arange(lo, min(lo + per_block, n_rays))
        width = max(int(counts[rays].max()), 1)
        cols = np.arange(width)
        valid = cols[None, :] < counts[rays, None]
        flat = offsets[rays, None] + cols[None, :]
        yield valid, flat


def _padded(valid, flat, values):
    block = np.zeros(valid.shape)
    block[valid] = values[flat[valid]]
    return block


def _exclusive_cumsum(block):
    out = np.zeros_like(block)
    np.cumsum(block[:, :-1], axis=1, out=out[:, 1:])
    return out


def filter_samples(offsets, counts, deltas, sigmas, alpha_thre, early_stop_eps):
    tau = sigmas * deltas
    cand = -np.expm1(-tau) > alpha_thre
    keep = np.zeros(len(deltas), dtype=bool)
    if not len(deltas):
        return keep
    for valid, flat in _ray_blocks(offsets, counts):
        # candidates first, in original order, then a padded scan over them
        cvalid = valid & cand[np.where(valid, flat, 0)]
        rank = np.cumsum(cvalid, axis=1) - 1
        width = max(int(cvalid.sum(axis=1).max()), 1)
        rows = np.nonzero(cvalid)[0]
        dense = np.zeros((valid.shape[0], width))
        dense[rows, rank[cvalid]] = tau[flat[cvalid]]
        stopped = np.exp(-np.cumsum(dense, axis=1)) < early_stop_eps
        in_row = np.arange(width)[None, :] < cvalid.sum(axis=1)[:, None]
        stopped &= in_row
        first = np.where(stopped.any(axis=1), stopped.argmax(axis=1), width)
        ok = rank[cvalid] <= first[rows]
        keep[flat[cvalid][ok]] = True
    return keep


def accumulate(offsets, counts, deltas, sigmas, values):
    n_rays = len(offsets)
    k = values.shape[1]
    tau = sigmas * deltas
    trans = np.empty(len(deltas))
    for valid, flat in _ray_blocks(offsets, counts):
        acc = _exclusive_cumsum(_padded(valid, flat, tau))
        trans[flat[valid]] = np.exp(-acc[valid])
    weights = trans * -np.expm1(-tau)
    ray_of = np.repeat(np.arange(n_rays), counts)
    out = np.zeros((n_rays, k))
    for c in range(k):
        out[:, c] = np.bincount(ray_of, weights=weights * values[:, c], minlength=n_rays)
    return out, weights, trans


def accumulate_backward(offsets, counts, deltas, sigmas, values, grad_out):
    n_rays = len(offsets)
    tau = sigmas * deltas
    trans = np.empty(len(deltas))
    for valid, flat in _ray_blocks(offsets, counts):
        acc = _exclusive_cumsum(_padded(valid, flat, tau))
        trans[flat[valid]] = np.exp(-acc[valid])
    weights = trans * -np.expm1(-tau)
    ray_of = np.repeat(np.arange(n_rays), counts)
    g = grad_out[ray_of]
    s = np.zeros(len(deltas))
    for c in range(values.shape[1]):
        s += values[:, c] * g[:, c]
    d_values = weights[:, None] * g
    ws = weights * s
    suffix = np.empty(len(deltas))
    for valid, flat in _ray_blocks(offsets, counts):
        # reversed rows put the zero padding first, which adds exact zeros
        rev = _exclusive_cumsum(_padded(valid, flat, ws)[:, ::-1])[:, ::-1]
        suffix[flat[valid]] = rev[valid]
    after = trans * np.exp(-tau)
    d_sigmas = deltas * (after * s - suffix)
    return d_values, d_sigmas


def _corner_setup(res, lo, hi, points):
    g = (points - lo) / (hi - lo) * (res - 1)
    top = res - 1.0
    inside = np.all((g >= 0.0) & (g <= top), axis=1)
    with np.errstate(invalid="ignore"):
        i0 = np.minimum(np.floor(np.where(inside[:, None], g, 0.0)).astype(np.int64), res - 2)
    f = g - i0
    return inside, i0, f


def _corners(res, i0, f):
    for corner in range(8):
        b = np.array([corner & 1, (corner >> 1) & 1, (corner >> 2) & 1])
        w = np.where(b[0], f[:, 0], 1.0 - f[:, 0]) * np.where(b[1], f[:, 1], 1.0 - f[:, 1]) \
            * np.where(b[2], f[:, 2], 1.0 - f[:, 2])
        idx = i0 + b
        v = idx[:, 0] + res * (idx[:, 1] + res * idx[:, 2])
        yield w, v


def trilinear_forward(res, lo, hi, params, points):
    inside, i0, f = _corner_setup(res, lo, hi, points)
    out = np.zeros((len(points), params.shape[1]))
    i0, f = i0[inside], f[inside]
    acc = np.zeros((len(i0), params.shape[1]))
    for w, v in _corners(res, i0, f):
        acc += w[:, None] * params[v]
    out[inside] = acc
    return out, inside


def trilinear_backward(res, lo, hi, points, grad, n_vertices):
    inside, i0, f = _corner_setup(res, lo, hi, points)
    i0, f, grad = i0[inside], f[inside], grad[inside]
    out = np.zeros((n_vertices, grad.shape[1]))
    for w, v in _corners(res, i0, f):
        np.add.at(out, v, w[:, None] * grad)
    return out
