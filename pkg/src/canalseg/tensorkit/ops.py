"""Forward/backward kernels on (N, C, D, H, W) arrays.

Every kernel preserves the input dtype, so the same code runs in float32 for
training and float64 for gradient checks. Reductions follow a fixed order
(per sample, per depth slab) and are therefore reproducible run to run.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..volgrid import linear_weights

# elements per im2col slab; keeps the column buffer cache-sized
_COL_BUDGET = 1 << 21


class ShapeMismatch(ValueError):
    pass


class OddDims(ValueError):
    pass


def _check5(x, name="x"):
    if x.ndim != 5:
        raise ShapeMismatch(f"{name} must be (N, C, D, H, W), got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(x_shape, w_shape, stride, padding):
    N, Cin, D, H, W = x_shape
    Cout, Cin_w, k, k2, k3 = w_shape
    if Cin_w != Cin:
        raise ShapeMismatch(f"weights expect {Cin_w} input channels, input has {Cin}")
    if not k == k2 == k3:
        raise ShapeMismatch("only cubic kernels are supported")
    if padding == "same":
        if k % 2 == 0:
            raise ShapeMismatch("same padding needs an odd kernel")
        pad = (k - 1) // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    out = tuple((n + 2 * pad - k) // stride + 1 for n in (D, H, W))
    if min(out) < 1:
        raise ShapeMismatch(f"kernel {k} with stride {stride} does not fit input {x_shape[2:]}")
    return k, pad, out


def _slabs(cin, k, out_dims):
    Do, Ho, Wo = out_dims
    step = max(1, _COL_BUDGET // max(1, cin * k ** 3 * Ho * Wo))
    for d0 in range(0, Do, step):
        yield d0, min(Do, d0 + step)


def _im2col(xp, k, s, d0, d1, Ho, Wo):
    """Column matrix (Cin*k^3, nd*Ho*Wo) of one padded sample ``xp`` (Cin, D, H, W)."""
    cin = xp.shape[0]
    nd = d1 - d0
    col = np.empty((cin, k, k, k, nd, Ho, Wo), dtype=xp.dtype)
    for a in range(k):
        da = d0 * s + a
        for b in range(k):
            for c in range(k):
                col[:, a, b, c] = xp[
                    :,
                    da:da + s * (nd - 1) + 1:s,
                    b:b + s * (Ho - 1) + 1:s,
                    c:c + s * (Wo - 1) + 1:s,
                ]
    return col.reshape(cin * k ** 3, nd * Ho * Wo)


def _col2im_add(dxp, dcol, k, s, d0, d1, Ho, Wo):
    cin = dxp.shape[0]
    nd = d1 - d0
    dcol = dcol.reshape(cin, k, k, k, nd, Ho, Wo)
    for a in range(k):
        da = d0 * s + a
        for b in range(k):
            for c in range(k):
                dxp[
                    :,
                    da:da + s * (nd - 1) + 1:s,
                    b:b + s * (Ho - 1) + 1:s,
                    c:c + s * (Wo - 1) + 1:s,
                ] += dcol[:, a, b, c]


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


def _correlate(x, w, k, stride, pad, out_dims):
    """Core strided cross-correlation of (N, Cin, ...) with (Cout, Cin, k, k, k)."""
    N, Cin = x.shape[:2]
    Cout = w.shape[0]
    Do, Ho, Wo = out_dims
    w2 = w.reshape(Cout, -1)
    y = np.empty((N, Cout, Do, Ho, Wo), dtype=x.dtype)
    if k == 1 and stride == 1 and pad == 0:
        for n in range(N):
            y[n] = (w2 @ x[n].reshape(Cin, -1)).reshape(Cout, Do, Ho, Wo)
        return y
    xp = _pad(x, pad)
    for n in range(N):
        for d0, d1 in _slabs(Cin, k, out_dims):
            col = _im2col(xp[n], k, stride, d0, d1, Ho, Wo)
            y[n, :, d0:d1] = (w2 @ col).reshape(Cout, d1 - d0, Ho, Wo)
    return y


def conv3_forward(x, w, b=None, stride=1, padding="same"):
    """3-D cross-correlation. ``w`` is (Cout, Cin, k, k, k)."""
    _check5(x)
    k, pad, out_dims = _conv_geometry(x.shape, w.shape, stride, padding)
    y = _correlate(x, w, k, stride, pad, out_dims)
    if b is not None:
        y += b.reshape(1, -1, 1, 1, 1)
    return y


def conv3_backward(dy, x, w, stride=1, padding="same", need_dx=True):
    """Returns (dx, dw, db); ``dx`` is None when ``need_dx`` is false."""
    k, pad, (Do, Ho, Wo) = _conv_geometry(x.shape, w.shape, stride, padding)
    N, Cin = x.shape[:2]
    Cout = w.shape[0]
    w2 = w.reshape(Cout, -1)
    dw2 = np.zeros_like(w2)
    db = dy.sum(axis=(0, 2, 3, 4))
    xp = _pad(x, pad)
    for n in range(N):
        if k == 1 and stride == 1 and pad == 0:
            dw2 += dy[n].reshape(Cout, -1) @ x[n].reshape(Cin, -1).T
            continue
        for d0, d1 in _slabs(Cin, k, (Do, Ho, Wo)):
            col = _im2col(xp[n], k, stride, d0, d1, Ho, Wo)
            dw2 += dy[n, :, d0:d1].reshape(Cout, -1) @ col.T
    dw = dw2.reshape(w.shape)
    if not need_dx:
        return None, dw, db
    if stride == 1:
        # input gradient = correlation of the re-padded output gradient with
        # the flipped, channel-transposed kernel
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        dx = _correlate(dy, wf, k, 1, k - 1 - pad, x.shape[2:])
        return dx, dw, db
    dxp = np.zeros_like(xp)
    for n in range(N):
        for d0, d1 in _slabs(Cin, k, (Do, Ho, Wo)):
            g = dy[n, :, d0:d1].reshape(Cout, -1)
            _col2im_add(dxp[n], w2.T @ g, k, stride, d0, d1, Ho, Wo)
    dx = dxp[:, :, pad:-pad, pad:-pad, pad:-pad] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


def conv_transpose3_forward(x, w, b=None):
    """Stride-2, kernel-2 transposed convolution. ``w`` is (Cin, Cout, 2, 2, 2)."""
    _check5(x)
    N, Cin, D, H, W = x.shape
    if w.shape[0] != Cin or w.shape[2:] != (2, 2, 2):
        raise ShapeMismatch(f"weights {w.shape} do not fit input with {Cin} channels")
    Cout = w.shape[1]
    wt = w.transpose(1, 2, 3, 4, 0).reshape(Cout * 8, Cin)
    y = np.empty((N, Cout, 2 * D, 2 * H, 2 * W), dtype=x.dtype)
    for n in range(N):
        t = (wt @ x[n].reshape(Cin, -1)).reshape(Cout, 2, 2, 2, D, H, W)
        y[n] = t.transpose(0, 4, 1, 5, 2, 6, 3).reshape(Cout, 2 * D, 2 * H, 2 * W)
    if b is not None:
        y += b.reshape(1, Cout, 1, 1, 1)
    return y


def conv_transpose3_backward(dy, x, w):
    N, Cin, D, H, W = x.shape
    Cout = w.shape[1]
    wt = w.transpose(1, 2, 3, 4, 0).reshape(Cout * 8, Cin)
    dwt = np.zeros_like(wt)
    dx = np.empty_like(x)
    for n in range(N):
        g = dy[n].reshape(Cout, D, 2, H, 2, W, 2).transpose(0, 2, 4, 6, 1, 3, 5)
        g = g.reshape(Cout * 8, -1)
        xs = x[n].reshape(Cin, -1)
        dwt += g @ xs.T
        dx[n] = (wt.T @ g).reshape(Cin, D, H, W)
    dw = dwt.reshape(Cout, 2, 2, 2, Cin).transpose(4, 0, 1, 2, 3)
    return dx, np.ascontiguousarray(dw), dy.sum(axis=(0, 2, 3, 4))


# ---------------------------------------------------------------------------
# pooling


def maxpool2_forward(x):
    """2x2x2 max pooling; returns (y, argmax) with argmax in window order."""
    _check5(x)
    N, C, D, H, W = x.shape
    if D % 2 or H % 2 or W % 2:
        raise OddDims(f"max pooling needs even spatial dims, got {(D, H, W)}")
    xr = x.reshape(N, C, D // 2, 2, H // 2, 2, W // 2, 2)
    xr = xr.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(N, C, D // 2, H // 2, W // 2, 8)
    idx = xr.argmax(axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool2_backward(dy, idx):
    N, C, D2, H2, W2 = dy.shape
    g = np.zeros((N, C, D2, H2, W2, 8), dtype=dy.dtype)
    np.put_along_axis(g, idx[..., None], dy[..., None], axis=-1)
    g = g.reshape(N, C, D2, H2, W2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return g.reshape(N, C, 2 * D2, 2 * H2, 2 * W2)


# ---------------------------------------------------------------------------
# batch normalisation

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train=True):
    """Per-channel normalisation over (N, D, H, W).

    In train mode the running statistics are updated in place.
    Returns (y, cache).
    """
    _check5(x)
    shape = (1, -1, 1, 1, 1)
    if train:
        mean = x.mean(axis=(0, 2, 3, 4))
        var = x.var(axis=(0, 2, 3, 4))
        n = x.size // x.shape[1]
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= BN_MOMENTUM
        running_mean += (1 - BN_MOMENTUM) * mean
        running_var *= BN_MOMENTUM
        running_var += (1 - BN_MOMENTUM) * unbiased
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return y, (xhat, inv_std, train)


def batchnorm_backward(dy, gamma, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv_std, train = cache
    shape = (1, -1, 1, 1, 1)
    axes = (0, 2, 3, 4)
    dbeta = dy.sum(axis=axes)
    dgamma = (dy * xhat).sum(axis=axes)
    dxhat = dy * gamma.reshape(shape)
    if not train:
        return dxhat * inv_std.reshape(shape), dgamma, dbeta
    n = dy.size // dy.shape[1]
    dx = (
        n * dxhat
        - dxhat.sum(axis=axes).reshape(shape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
    ) * (inv_std.reshape(shape) / n)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activations


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return dy * (x > 0)


def sigmoid(x):
    return expit(x)


def sigmoid_backward(dy, y):
    return dy * y * (1 - y)


# ---------------------------------------------------------------------------
# trilinear resize (voxel-centre convention shared with volgrid.resample)


def resize_matrices(in_dims, out_dims, dtype):
    return tuple(linear_weights(n, m).astype(dtype) for n, m in zip(in_dims, out_dims))


def resize_forward(x, out_dims):
    _check5(x)
    N, C, D, H, W = x.shape
    Do, Ho, Wo = out_dims
    if (D, H, W) == tuple(out_dims):
        return x.copy()
    md, mh, mw = resize_matrices((D, H, W), out_dims, x.dtype)
    t = x @ mw.T  # (N, C, D, H, Wo)
    t = mh @ t  # (N, C, D, Ho, Wo)
    t = md @ t.reshape(N, C, D, Ho * Wo)
    return t.reshape(N, C, Do, Ho, Wo)


def resize_backward(dy, in_dims):
    N, C, Do, Ho, Wo = dy.shape
    D, H, W = in_dims
    if (D, H, W) == (Do, Ho, Wo):
        return dy.copy()
    md, mh, mw = resize_matrices(in_dims, (Do, Ho, Wo), dy.dtype)
    t = md.T @ dy.reshape(N, C, Do, Ho * Wo)
    t = t.reshape(N, C, D, Ho, Wo)
    t = mh.T @ t
    return t @ mw


# ---------------------------------------------------------------------------
# loss

DICE_SMOOTH = 1.0


def dice_loss(p, g, smooth=DICE_SMOOTH):
    """Soft dice loss over the whole batch. Returns (loss, dL/dp)."""
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs target {g.shape}")
    inter = np.sum(p * g, dtype=np.float64)
    total = np.sum(p, dtype=np.float64) + np.sum(g, dtype=np.float64)
    num = 2.0 * inter + smooth
    den = total + smooth
    loss = 1.0 - num / den
    grad = -(2.0 * g * den - num) / den ** 2
    return float(loss), grad.astype(p.dtype)
