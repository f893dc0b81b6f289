"""Slow reference implementations used as test oracles.

Each one follows the textbook definition (explicit loops, float64, or plain
boolean set algebra) and shares no code with the package.
"""
from __future__ import annotations

import itertools

import numpy as np


def conv3(x, w, b, stride=1, pad=0):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    N, C, D, H, W = x.shape
    F, _, k, _, _ = w.shape
    xp = np.zeros((N, C, D + 2 * pad, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + D, pad:pad + H, pad:pad + W] = x
    out = [(n + 2 * pad - k) // stride + 1 for n in (D, H, W)]
    y = np.zeros((N, F, *out))
    for n, f, i, j, l in itertools.product(range(N), range(F), *map(range, out)):
        win = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k, l * stride:l * stride + k]
        y[n, f, i, j, l] = np.sum(win * w[f]) + (b[f] if b is not None else 0.0)
    return y


def conv_transpose_2x2x2(x, w, b):
    """Each input voxel scatters a weighted 2x2x2 block into the doubled grid."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    N, C, D, H, W = x.shape
    F = w.shape[1]
    y = np.zeros((N, F, 2 * D, 2 * H, 2 * W))
    for n, c, i, j, l in itertools.product(range(N), range(C), range(D), range(H), range(W)):
        for a, bb, cc in itertools.product(range(2), repeat=3):
            y[n, :, 2 * i + a, 2 * j + bb, 2 * l + cc] += x[n, c, i, j, l] * w[c, :, a, bb, cc]
    return y + np.asarray(b, dtype=np.float64)[None, :, None, None, None]


def maxpool2(x):
    N, C, D, H, W = x.shape
    y = np.zeros((N, C, D // 2, H // 2, W // 2))
    for n, c, i, j, l in itertools.product(range(N), range(C), range(D // 2), range(H // 2), range(W // 2)):
        y[n, c, i, j, l] = x[n, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * l:2 * l + 2].max()
    return y


def batchnorm_train(x, gamma, beta, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    y = np.empty_like(x)
    for c in range(x.shape[1]):
        vals = x[:, c]
        mu = sum(vals.ravel()) / vals.size
        var = sum((v - mu) ** 2 for v in vals.ravel()) / vals.size
        y[:, c] = (vals - mu) / np.sqrt(var + eps) * gamma[c] + beta[c]
    return y


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.array([1.0 / (1.0 + np.exp(-v)) if v >= 0 else np.exp(v) / (1.0 + np.exp(v)) for v in x.ravel()]).reshape(x.shape)


def relu(x):
    return np.array([max(float(v), 0.0) for v in np.ravel(x)]).reshape(np.shape(x))


def trilinear_voxel(arr, out_dims):
    """Per-output-voxel trilinear interpolation with centre-aligned sampling."""
    arr = np.asarray(arr, dtype=np.float64)
    out = np.zeros(out_dims)
    for idx in itertools.product(*map(range, out_dims)):
        corners = []
        for d, (i, n_in, n_out) in enumerate(zip(idx, arr.shape, out_dims)):
            s = (i + 0.5) * n_in / n_out - 0.5
            s = min(max(s, 0.0), n_in - 1)
            lo = int(np.floor(s))
            hi = min(lo + 1, n_in - 1)
            t = s - lo
            corners.append(((lo, 1 - t), (hi, t)))
        val = 0.0
        for (i0, w0), (i1, w1), (i2, w2) in itertools.product(*corners):
            val += w0 * w1 * w2 * arr[i0, i1, i2]
        out[idx] = val
    return out


def point_in_polygon(px, py, pts):
    """PNPOLY crossing test."""
    inside = False
    n = len(pts)
    j = n - 1
    for i in range(n):
        xi, yi = pts[i]
        xj, yj = pts[j]
        if (yi > py) != (yj > py) and px < (xj - xi) * (py - yi) / (yj - yi) + xi:
            inside = not inside
        j = i
    return inside


def _shifted(m, o, fill):
    """View of m moved so that out[x] = m[x + o], out-of-bounds -> fill."""
    r = max(abs(a) for a in o) if o else 0
    padded = np.full(tuple(n + 2 * r for n in m.shape), fill, dtype=bool)
    padded[tuple(slice(r, r + n) for n in m.shape)] = m
    return padded[tuple(slice(r + a, r + a + n) for a, n in zip(o, m.shape))]


def dilate(mask, offsets):
    """Minkowski dilation: x is set when some offset o has mask[x - o] set."""
    m = np.asarray(mask, dtype=bool)
    out = np.zeros_like(m)
    for o in offsets:
        out |= _shifted(m, tuple(-a for a in o), False)
    return out


def erode(mask, offsets):
    """Minkowski erosion: every x + o must be set; outside the grid counts as unset."""
    m = np.asarray(mask, dtype=bool)
    out = np.ones_like(m)
    for o in offsets:
        out &= _shifted(m, tuple(o), False)
    return out


def box_offsets(r=1):
    return [o for o in itertools.product(range(-r, r + 1), repeat=3)]


def cross_offsets(r=1):
    return [o for o in box_offsets(r) if sum(abs(a) for a in o) <= r]


def flood_fill_components(mask):
    """26-connected components by depth-first search in x-fastest scan order.

    Returns (labels, sizes) with labels numbered by first voxel visited.
    """
    m = np.asarray(mask, dtype=bool)
    labels = np.zeros(m.shape, dtype=np.int64)
    nbrs = [o for o in box_offsets(1) if o != (0, 0, 0)]
    sizes = []
    nx, ny, nz = m.shape
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not m[x, y, z] or labels[x, y, z]:
                    continue
                lab = len(sizes) + 1
                labels[x, y, z] = lab
                queue, count = [(x, y, z)], 0
                while queue:
                    p = queue.pop()
                    count += 1
                    for o in nbrs:
                        q = (p[0] + o[0], p[1] + o[1], p[2] + o[2])
                        if all(0 <= c < n for c, n in zip(q, m.shape)) and m[q] and not labels[q]:
                            labels[q] = lab
                            queue.append(q)
                sizes.append(count)
    return labels, np.array(sizes, dtype=np.int64)
