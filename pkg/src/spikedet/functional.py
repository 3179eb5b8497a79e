"""Forward and backward numpy primitives over (N, C, H, W) arrays.

N is whatever leading extent the caller flattened (usually T * B). Layers
and the gradient tape are built on top of these.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._backend import kernels


def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _patches(x, k, stride, pad):
    """(N, C, k, k, Ho, Wo) strided view of zero-padded x."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (N, C, Ho, Wo, k, k)
    return win.transpose(0, 1, 4, 5, 2, 3)


def conv2d_forward(x, w, b=None, stride=1, pad=0, groups=1):
    """Cross-correlation with zero padding. Returns (y, cache)."""
    N, C, H, W = x.shape
    O, Cg, k, _ = w.shape
    if C != Cg * groups:
        raise ValueError(f"dimension mismatch: input has {C} channels, "
                         f"weight expects {Cg * groups} (groups={groups})")
    cols = _patches(x, k, stride, pad)
    Ho, Wo = cols.shape[4], cols.shape[5]
    if groups == 1:
        cols2 = np.ascontiguousarray(cols).reshape(N, C * k * k, Ho * Wo)
        y = np.matmul(w.reshape(O, -1), cols2)
    else:
        Og = O // groups
        cols2 = np.ascontiguousarray(cols).reshape(N, groups, Cg * k * k, Ho * Wo)
        wg = w.reshape(groups, Og, Cg * k * k)
        y = np.einsum("gok,ngkl->ngol", wg, cols2, optimize=True)
    y = y.reshape(N, O, Ho, Wo)
    if b is not None:
        y = y + b.reshape(1, O, 1, 1)
    return y, (cols2, x.shape, w.shape, stride, pad, groups)


def conv2d_backward(gy, w, cache, need_input_grad=True):
    """Gradients (gx, gw, gb) for conv2d_forward."""
    cols2, xshape, wshape, stride, pad, groups = cache
    N, C, H, W = xshape
    O, Cg, k, _ = wshape
    Ho, Wo = gy.shape[2], gy.shape[3]
    gb = gy.sum(axis=(0, 2, 3))
    if groups == 1:
        gy2 = gy.reshape(N, O, Ho * Wo)
        gw = np.einsum("nol,nkl->ok", gy2, cols2, optimize=True).reshape(wshape)
        gx = None
        if need_input_grad:
            gcols = np.matmul(w.reshape(O, -1).T, gy2)
            gx = kernels.col2im(gcols.reshape(N, C, k, k, Ho, Wo), H, W, stride, pad)
    else:
        Og = O // groups
        gy2 = gy.reshape(N, groups, Og, Ho * Wo)
        gw = np.einsum("ngol,ngkl->gok", gy2, cols2, optimize=True).reshape(wshape)
        gx = None
        if need_input_grad:
            wg = w.reshape(groups, Og, Cg * k * k)
            gcols = np.einsum("gok,ngol->ngkl", wg, gy2, optimize=True)
            gx = kernels.col2im(gcols.reshape(N, C, k, k, Ho, Wo), H, W, stride, pad)
    return gx, gw, gb


def maxpool2_forward(x):
    """2x2 max pooling with stride 2. Returns (y, argmax index in the 4-cell window)."""
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"dimension error: maxpool2 needs even H, W, got {H}x{W}")
    win = x.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(N, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool2_backward(gy, idx):
    N, C, Ho, Wo = gy.shape
    g = np.zeros((N, C, Ho, Wo, 4), dtype=np.float64)
    np.put_along_axis(g, idx[..., None], gy[..., None], axis=-1)
    g = g.reshape(N, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return g.reshape(N, C, Ho * 2, Wo * 2)


def stride_downsample(x, s=2):
    N, C, H, W = x.shape
    if H % s or W % s:
        raise ValueError(f"dimension error: {H}x{W} not divisible by stride {s}")
    return x[:, :, ::s, ::s]


def stride_downsample_backward(gy, shape, s=2):
    g = np.zeros(shape, dtype=np.float64)
    g[:, :, ::s, ::s] = gy
    return g


def nni_upsample(x, f=2):
    if f < 1:
        raise ValueError("upsampling factor must be >= 1")
    return np.repeat(np.repeat(x, f, axis=2), f, axis=3)


def nni_upsample_backward(gy, f=2):
    N, C, H, W = gy.shape
    return gy.reshape(N, C, H // f, f, W // f, f).sum(axis=(3, 5))


def tdbn_scale(lam, alpha, v_th, var, eps):
    return lam * alpha * v_th / np.sqrt(var + eps)


def tdbn_forward(x, lam, beta, alpha, v_th, mean, var, eps):
    """Affine normalisation per channel with the given statistics."""
    scale = tdbn_scale(lam, alpha, v_th, var, eps)
    return (x - mean.reshape(1, -1, 1, 1)) * scale.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)


def batch_stats(x):
    """Per-channel mean and biased variance over (N, H, W)."""
    if x.size == 0:
        raise ValueError("statistics error: empty batch")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    return mean, var


def tdbn_train_backward(gy, xhat, lam, alpha, v_th, var, eps):
    """Gradients through batch-statistic tdBN.

    Returns (gx, glam, gbeta); ``xhat`` is the normalised input.
    """
    m = gy.shape[0] * gy.shape[2] * gy.shape[3]
    inv = 1.0 / np.sqrt(var + eps)
    gamma = lam * alpha * v_th
    gbeta = gy.sum(axis=(0, 2, 3))
    glam = (gy * xhat).sum(axis=(0, 2, 3)) * alpha * v_th
    gxhat = gy * gamma.reshape(1, -1, 1, 1)
    gx = (inv.reshape(1, -1, 1, 1) / m) * (
        m * gxhat
        - gxhat.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    )
    return gx, glam, gbeta
