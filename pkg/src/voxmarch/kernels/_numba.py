"""Loop kernels compiled with numba.

Per-ray kernels run under ``prange`` and write only to slots owned by their
ray, so results do not depend on the thread count. Scatter-adds into shared
buffers run sequentially.
"""

import math

import numpy as np
from numba import njit, prange

SPHERE_TAG = 1


@njit(cache=True, inline="always")
def _cell_index(ctype, cp, res, px, py, pz):
    if ctype == SPHERE_TAG:
        ux = (px - cp[0]) / cp[3]
        uy = (py - cp[1]) / cp[3]
        uz = (pz - cp[2]) / cp[3]
        n = math.sqrt(ux * ux + uy * uy + uz * uz)
        if n > 1.0:
            s = (2.0 - 1.0 / n) / n
            ux = ux * s
            uy = uy * s
            uz = uz * s
        gx = (ux + 2.0) / 4.0
        gy = (uy + 2.0) / 4.0
        gz = (uz + 2.0) / 4.0
    else:
        gx = (px - cp[0]) / (cp[3] - cp[0])
        gy = (py - cp[1]) / (cp[4] - cp[1])
        gz = (pz - cp[2]) / (cp[5] - cp[2])
    if not (gx >= 0.0 and gx <= 1.0 and gy >= 0.0 and gy <= 1.0 and gz >= 0.0 and gz <= 1.0):
        return -1
    ix = min(int(math.floor(gx * res)), res - 1)
    iy = min(int(math.floor(gy * res)), res - 1)
    iz = min(int(math.floor(gz * res)), res - 1)
    return ix + res * (iy + res * iz)


@njit(cache=True, parallel=True)
def grid_lookup(ctype, cparams, res, bits, points):
    n = points.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    for i in prange(n):
        c = _cell_index(ctype, cparams, res, points[i, 0], points[i, 1], points[i, 2])
        if c >= 0:
            out[i] = bits[c] != 0
    return out


@njit(cache=True)
def _march_ray(ox, oy, oz, dx, dy, dz, near, far, guard, step, growth, max_samples,
               ctype, cp, res, bits, out_s, out_e, offset, write):
    n = 0
    base = near
    j = 0
    dt = step
    grow = ctype == SPHERE_TAG and growth > 1.0
    while n < max_samples:
        t0 = base + j * dt
        if far - t0 <= guard:
            break
        t1 = base + (j + 1) * dt
        if t1 > far:
            t1 = far
        mid = (t0 + t1) / 2.0
        px = ox + dx * mid
        py = oy + dy * mid
        pz = oz + dz * mid
        c = _cell_index(ctype, cp, res, px, py, pz)
        if c >= 0 and bits[c] != 0:
            if write:
                out_s[offset + n] = t0
                out_e[offset + n] = t1
            n += 1
        j += 1
        if grow:
            ux = (px - cp[0]) / cp[3]
            uy = (py - cp[1]) / cp[3]
            uz = (pz - cp[2]) / cp[3]
            if ux * ux + uy * uy + uz * uz > 1.0:
                base = t1
                j = 0
                dt = dt * growth
    return n


@njit(cache=True, parallel=True)
def march_grid(origins, dirs, near, far, guard, step, growth, max_samples, ctype, cparams, res, bits):
    n_rays = origins.shape[0]
    counts = np.zeros(n_rays, dtype=np.int64)
    dummy = np.zeros(0)
    for r in prange(n_rays):
        counts[r] = _march_ray(origins[r, 0], origins[r, 1], origins[r, 2],
                               dirs[r, 0], dirs[r, 1], dirs[r, 2],
                               near, far, guard, step, growth, max_samples,
                               ctype, cparams, res, bits, dummy, dummy, 0, False)
    offsets = np.zeros(n_rays, dtype=np.int64)
    total = 0
    for r in range(n_rays):
        offsets[r] = total
        total += counts[r]
    t_starts = np.empty(total)
    t_ends = np.empty(total)
    for r in prange(n_rays):
        _march_ray(origins[r, 0], origins[r, 1], origins[r, 2],
                   dirs[r, 0], dirs[r, 1], dirs[r, 2],
                   near, far, guard, step, growth, max_samples,
                   ctype, cparams, res, bits, t_starts, t_ends, offsets[r], True)
    return counts, t_starts, t_ends


@njit(cache=True, parallel=True)
def filter_samples(offsets, counts, deltas, sigmas, alpha_thre, early_stop_eps):
    keep = np.zeros(deltas.shape[0], dtype=np.bool_)
    for r in prange(offsets.shape[0]):
        acc = 0.0
        for i in range(offsets[r], offsets[r] + counts[r]):
            tau = sigmas[i] * deltas[i]
            alpha = -math.expm1(-tau)
            if alpha <= alpha_thre:
                continue
            keep[i] = True
            acc += tau
            if math.exp(-acc) < early_stop_eps:
                break
    return keep


@njit(cache=True, parallel=True)
def accumulate(offsets, counts, deltas, sigmas, values):
    n_rays = offsets.shape[0]
    k = values.shape[1]
    out = np.zeros((n_rays, k))
    weights = np.empty(deltas.shape[0])
    trans = np.empty(deltas.shape[0])
    for r in prange(n_rays):
        acc = 0.0
        for i in range(offsets[r], offsets[r] + counts[r]):
            tau = sigmas[i] * deltas[i]
            t = math.exp(-acc)
            w = t * -math.expm1(-tau)
            trans[i] = t
            weights[i] = w
            for c in range(k):
                out[r, c] += w * values[i, c]
            acc += tau
    return out, weights, trans


@njit(cache=True, parallel=True)
def accumulate_backward(offsets, counts, deltas, sigmas, values, grad_out):
    n = deltas.shape[0]
    k = values.shape[1]
    d_values = np.zeros((n, k))
    d_sigmas = np.zeros(n)
    for r in prange(offsets.shape[0]):
        start = offsets[r]
        stop = start + counts[r]
        # forward sweep: transmittance and weights
        acc = 0.0
        ts = np.empty(stop - start)
        ws = np.empty(stop - start)
        for i in range(start, stop):
            tau = sigmas[i] * deltas[i]
            t = math.exp(-acc)
            ts[i - start] = t
            ws[i - start] = t * -math.expm1(-tau)
            acc += tau
        # reverse sweep with the suffix sum of w_j * s_j
        suffix = 0.0
        for i in range(stop - 1, start - 1, -1):
            w = ws[i - start]
            s = 0.0
            for c in range(k):
                s += values[i, c] * grad_out[r, c]
                d_values[i, c] = w * grad_out[r, c]
            after = ts[i - start] * math.exp(-sigmas[i] * deltas[i])
            d_sigmas[i] = deltas[i] * (after * s - suffix)
            suffix += w * s
    return d_values, d_sigmas


@njit(cache=True, inline="always")
def _corner_setup(res, lo, hi, px, py, pz):
    gx = (px - lo[0]) / (hi[0] - lo[0]) * (res - 1)
    gy = (py - lo[1]) / (hi[1] - lo[1]) * (res - 1)
    gz = (pz - lo[2]) / (hi[2] - lo[2]) * (res - 1)
    top = res - 1.0
    inside = gx >= 0.0 and gx <= top and gy >= 0.0 and gy <= top and gz >= 0.0 and gz <= top
    ix = min(int(math.floor(gx)), res - 2) if inside else 0
    iy = min(int(math.floor(gy)), res - 2) if inside else 0
    iz = min(int(math.floor(gz)), res - 2) if inside else 0
    return inside, ix, iy, iz, gx - ix, gy - iy, gz - iz


@njit(cache=True, parallel=True)
def trilinear_forward(res, lo, hi, params, points):
    n = points.shape[0]
    k = params.shape[1]
    out = np.zeros((n, k))
    inside_mask = np.zeros(n, dtype=np.bool_)
    for i in prange(n):
        inside, ix, iy, iz, fx, fy, fz = _corner_setup(res, lo, hi, points[i, 0], points[i, 1], points[i, 2])
        if not inside:
            continue
        inside_mask[i] = True
        for corner in range(8):
            bx = corner & 1
            by = (corner >> 1) & 1
            bz = (corner >> 2) & 1
            w = (fx if bx else 1.0 - fx) * (fy if by else 1.0 - fy) * (fz if bz else 1.0 - fz)
            v = (ix + bx) + res * ((iy + by) + res * (iz + bz))
            for c in range(k):
                out[i, c] += w * params[v, c]
    return out, inside_mask


@njit(cache=True)
def trilinear_backward(res, lo, hi, points, grad, n_vertices):
    k = grad.shape[1]
    out = np.zeros((n_vertices, k))
    for i in range(points.shape[0]):
        inside, ix, iy, iz, fx, fy, fz = _corner_setup(res, lo, hi, points[i, 0], points[i, 1], points[i, 2])
        if not inside:
            continue
        for corner in range(8):
            bx = corner & 1
            by = (corner >> 1) & 1
            bz = (corner >> 2) & 1
            w = (fx if bx else 1.0 - fx) * (fy if by else 1.0 - fy) * (fz if bz else 1.0 - fz)
            v = (ix + bx) + res * ((iy + by) + res * (iz + bz))
            for c in range(k):
                out[v, c] += w * grad[i, c]
    return out
