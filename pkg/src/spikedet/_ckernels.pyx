# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Mirrors ``_kernels_py`` function for function."""
import numpy as np
cimport numpy as cnp
from libc.math cimport copysign, fabs, floor, fmax, fmin

cnp.import_array()


cdef double _EXACT_CAST = 4503599627370496.0  # 2**52


cdef inline double _round_half_away(double u) noexcept nogil:
    cdef double a = fabs(u) + 0.5
    # truncating a non-negative double equals floor; the integer cast avoids
    # a libm call on targets without a native floor instruction
    if a < _EXACT_CAST:
        return copysign(<double>(<long long>a), u)
    return copysign(floor(a), u)


def round_half_away(u):
    arr = np.asarray(u, dtype=np.float64)
    out = np.empty_like(arr)
    cdef double[::1] src = arr.reshape(-1)
    cdef double[::1] dst = out.reshape(-1)
    cdef Py_ssize_t i, n = src.shape[0]
    with nogil:
        for i in range(n):
            dst[i] = _round_half_away(src[i])
    return out if arr.ndim else float(out)


def ilif_forward(x, h0, double tau, double v_th, int d_max):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t T = xv.shape[0], M = xv.shape[1]
    spikes = np.empty((T, M), dtype=np.int32)
    u_all = np.empty((T, M), dtype=np.float64)
    h_arr = np.array(h0, dtype=np.float64, copy=True).reshape(-1)
    cdef int[:, ::1] sv = spikes
    cdef double[:, ::1] uv = u_all
    cdef double[::1] h = h_arr
    cdef Py_ssize_t t, i
    cdef double u, o, dmax = d_max
    with nogil:
        for t in range(T):
            for i in range(M):
                u = tau * h[i] + xv[t, i]
                # branch-free clip: spike counts are data dependent
                o = fmin(fmax(_round_half_away(u), 0.0), dmax)
                h[i] = u - v_th * o
                uv[t, i] = u
                sv[t, i] = <int>o
    return spikes, u_all, h_arr


def ilif_backward(grad_o, u, double tau, double v_th, int d_max):
    cdef double[:, ::1] gv = np.ascontiguousarray(grad_o, dtype=np.float64)
    cdef double[:, ::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t T = gv.shape[0], M = gv.shape[1]
    grad_x = np.empty((T, M), dtype=np.float64)
    cdef double[:, ::1] gx = grad_x
    g_h_arr = np.zeros(M, dtype=np.float64)
    cdef double[::1] g_h = g_h_arr
    cdef Py_ssize_t t, i
    cdef double s, g_u, dmax = d_max
    with nogil:
        for t in range(T - 1, -1, -1):
            for i in range(M):
                s = <double>(uv[t, i] >= 0.0) * <double>(uv[t, i] <= dmax)
                g_u = gv[t, i] * s + g_h[i] * (1.0 - v_th * s)
                gx[t, i] = g_u
                g_h[i] = tau * g_u
    return grad_x


def lif_forward(x, h0, double tau, double v_th):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t T = xv.shape[0], M = xv.shape[1]
    spikes = np.empty((T, M), dtype=np.int32)
    u_all = np.empty((T, M), dtype=np.float64)
    h_arr = np.array(h0, dtype=np.float64, copy=True).reshape(-1)
    cdef int[:, ::1] sv = spikes
    cdef double[:, ::1] uv = u_all
    cdef double[::1] h = h_arr
    cdef Py_ssize_t t, i
    cdef double u, o
    with nogil:
        for t in range(T):
            for i in range(M):
                u = tau * h[i] + xv[t, i]
                o = <double>(u >= v_th)
                h[i] = u - v_th * o
                uv[t, i] = u
                sv[t, i] = <int>o
    return spikes, u_all, h_arr


def lif_backward(grad_o, u, double tau, double v_th, double a):
    cdef double[:, ::1] gv = np.ascontiguousarray(grad_o, dtype=np.float64)
    cdef double[:, ::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t T = gv.shape[0], M = gv.shape[1]
    grad_x = np.empty((T, M), dtype=np.float64)
    cdef double[:, ::1] gx = grad_x
    g_h_arr = np.zeros(M, dtype=np.float64)
    cdef double[::1] g_h = g_h_arr
    cdef Py_ssize_t t, i
    cdef double s, g_u, half = 0.5 * a
    with nogil:
        for t in range(T - 1, -1, -1):
            for i in range(M):
                s = <double>(fabs(uv[t, i] - v_th) <= half) / a
                g_u = gv[t, i] * s + g_h[i] * (1.0 - v_th * s)
                gx[t, i] = g_u
                g_h[i] = tau * g_u
    return grad_x


def if_unrolled_count(u, double v_th, int d_max):
    arr = np.asarray(u, dtype=np.float64)
    count = np.zeros(arr.shape, dtype=np.int32)
    cdef double[::1] src = np.ascontiguousarray(arr).reshape(-1)
    cdef int[::1] dst = count.reshape(-1)
    cdef Py_ssize_t i, n = src.shape[0]
    cdef int k, c
    cdef double m, fire
    with nogil:
        for i in range(n):
            m = src[i] + 0.5
            c = 0
            for k in range(d_max):
                fire = <double>(m >= v_th)
                c += <int>fire
                m = m - v_th * fire
            dst[i] = c
    return count


def box_density(mask, int S):
    cdef double[:, :, ::1] mv = np.ascontiguousarray(mask, dtype=np.float64)
    cdef Py_ssize_t C = mv.shape[0], H = mv.shape[1], W = mv.shape[2]
    out = np.empty((C, H, W), dtype=np.float64)
    ii_arr = np.zeros((H + 1, W + 1), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef double[:, ::1] ii = ii_arr
    cdef Py_ssize_t r = S // 2, c, i, j, p0, p1, q0, q1
    cdef double row
    with nogil:
        for c in range(C):
            # integral image; counts are small integers, so every sum is exact
            for i in range(H):
                row = 0.0
                for j in range(W):
                    row = row + mv[c, i, j]
                    ii[i + 1, j + 1] = ii[i, j + 1] + row
            for i in range(H):
                p0 = i - r if i >= r else 0
                p1 = i + r + 1 if i + r + 1 <= H else H
                for j in range(W):
                    q0 = j - r if j >= r else 0
                    q1 = j + r + 1 if j + r + 1 <= W else W
                    ov[c, i, j] = ((ii[p1, q1] - ii[p0, q1] - ii[p1, q0] + ii[p0, q0])
                                   / <double>((p1 - p0) * (q1 - q0)))
    return out


def event_bin(t, x, y, p, int T, long long window, int H, int W):
    cdef long long[::1] tv = np.ascontiguousarray(t, dtype=np.int64)
    cdef long long[::1] xv = np.ascontiguousarray(x, dtype=np.int64)
    cdef long long[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef long long[::1] pv = np.ascontiguousarray(p, dtype=np.int64)
    out = np.zeros((T, 2, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t k, n = tv.shape[0]
    cdef long long b
    with nogil:
        for k in range(n):
            b = (tv[k] * T) // window
            if b > T - 1:
                b = T - 1
            ov[b, pv[k], yv[k], xv[k]] += 1.0
    return out


def col2im(cols, int H, int W, int stride, int pad):
    cdef double[:, :, :, :, :, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64)
    cdef Py_ssize_t N = cv.shape[0], C = cv.shape[1], k = cv.shape[2]
    cdef Py_ssize_t Ho = cv.shape[4], Wo = cv.shape[5]
    padded = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    cdef double[:, :, :, ::1] pv = padded
    cdef Py_ssize_t n, c, i, j, a, b
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        for a in range(Ho):
                            for b in range(Wo):
                                pv[n, c, i + stride * a, j + stride * b] += cv[n, c, i, j, a, b]
    if pad:
        return padded[:, :, pad:pad + H, pad:pad + W]
    return padded
