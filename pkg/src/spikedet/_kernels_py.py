"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature and bitwise-identical results. ``spikedet._backend`` picks one at
import time.
"""
import numpy as np


def round_half_away(u):
    """Round to nearest integer, ties away from zero (round(1.5)=2, round(-0.5)=-1)."""
    u = np.asarray(u, dtype=np.float64)
    return np.copysign(np.floor(np.abs(u) + 0.5), u)


def ilif_forward(x, h0, tau, v_th, d_max):
    """Run integer LIF dynamics over the leading time axis.

    x: (T, M) float64, h0: (M,) float64.
    Returns (spikes int32 (T, M), membrane u float64 (T, M), h_last (M,)).
    """
    T = x.shape[0]
    spikes = np.empty(x.shape, dtype=np.int32)
    u_all = np.empty(x.shape, dtype=np.float64)
    h = np.array(h0, dtype=np.float64, copy=True)
    for t in range(T):
        u = tau * h + x[t]
        o = np.clip(round_half_away(u), 0.0, float(d_max))
        h = u - v_th * o
        u_all[t] = u
        spikes[t] = o
    return spikes, u_all, h


def ilif_backward(grad_o, u, tau, v_th, d_max):
    """BPTT through integer LIF with the box surrogate 1[0 <= u <= D]."""
    T = grad_o.shape[0]
    grad_x = np.empty(grad_o.shape, dtype=np.float64)
    g_h = np.zeros(grad_o.shape[1:], dtype=np.float64)
    for t in range(T - 1, -1, -1):
        s = ((u[t] >= 0.0) & (u[t] <= d_max)).astype(np.float64)
        g_u = grad_o[t] * s + g_h * (1.0 - v_th * s)
        grad_x[t] = g_u
        g_h = tau * g_u
    return grad_x


def lif_forward(x, h0, tau, v_th):
    """Binary LIF with soft reset; fires when u >= v_th."""
    T = x.shape[0]
    spikes = np.empty(x.shape, dtype=np.int32)
    u_all = np.empty(x.shape, dtype=np.float64)
    h = np.array(h0, dtype=np.float64, copy=True)
    for t in range(T):
        u = tau * h + x[t]
        o = (u >= v_th).astype(np.float64)
        h = u - v_th * o
        u_all[t] = u
        spikes[t] = o
    return spikes, u_all, h


def lif_backward(grad_o, u, tau, v_th, a):
    """BPTT through binary LIF with the rectangular surrogate (1/a)1[|u - v_th| <= a/2]."""
    T = grad_o.shape[0]
    grad_x = np.empty(grad_o.shape, dtype=np.float64)
    g_h = np.zeros(grad_o.shape[1:], dtype=np.float64)
    for t in range(T - 1, -1, -1):
        s = (np.abs(u[t] - v_th) <= 0.5 * a).astype(np.float64) / a
        g_u = grad_o[t] * s + g_h * (1.0 - v_th * s)
        grad_x[t] = g_u
        g_h = tau * g_u
    return grad_x


def if_unrolled_count(u, v_th, d_max):
    """Spikes emitted by a soft-reset IF neuron over d_max zero-input micro-steps
    starting from membrane u + 0.5."""
    m = np.asarray(u, dtype=np.float64) + 0.5
    count = np.zeros(m.shape, dtype=np.int32)
    for _ in range(d_max):
        fire = m >= v_th
        count += fire
        m = m - v_th * fire
    return count


def box_density(mask, S):
    """Local density of ``mask`` (C, H, W) over S x S windows clipped at the border.

    Each output cell is the window sum divided by the number of in-bounds cells.
    """
    mask = np.asarray(mask, dtype=np.float64)
    C, H, W = mask.shape
    r = S // 2
    ii = np.zeros((C, H + 1, W + 1), dtype=np.float64)
    ii[:, 1:, 1:] = mask.cumsum(axis=1).cumsum(axis=2)
    rows = np.arange(H)
    cols = np.arange(W)
    r0 = np.clip(rows - r, 0, H)
    r1 = np.clip(rows + r + 1, 0, H)
    c0 = np.clip(cols - r, 0, W)
    c1 = np.clip(cols + r + 1, 0, W)
    total = (ii[:, r1[:, None], c1[None, :]] - ii[:, r0[:, None], c1[None, :]]
             - ii[:, r1[:, None], c0[None, :]] + ii[:, r0[:, None], c0[None, :]])
    count = ((r1 - r0)[:, None] * (c1 - c0)[None, :]).astype(np.float64)
    return total / count


def event_bin(t, x, y, p, T, window, H, W):
    """Scatter events into a (T, 2, H, W) count tensor.

    Bin index is floor(t * T / window), clamped to T - 1. Inputs are int64
    arrays already validated by the caller.
    """
    out = np.zeros((T, 2, H, W), dtype=np.float64)
    b = (t * T) // window
    b = np.minimum(b, T - 1)
    np.add.at(out, (b, p, y, x), 1.0)
    return out


def col2im(cols, H, W, stride, pad):
    """Fold (N, C, k, k, Ho, Wo) patch gradients back onto an (N, C, H, W) image."""
    N, C, k, _, Ho, Wo = cols.shape
    out = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, :, i, j]
    if pad:
        return out[:, :, pad:pad + H, pad:pad + W]
    return out
