# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: DBSCAN labelling, rotated-box IoU, jerk objective."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, sqrt, fabs, fmin, fmax

cnp.import_array()


cdef inline double _sqdist(const double[:, ::1] X, Py_ssize_t i, Py_ssize_t j, Py_ssize_t d) nogil:
    cdef double acc = 0.0, diff
    cdef Py_ssize_t k
    for k in range(d):
        diff = X[j, k] - X[i, k]
        acc += diff * diff
    return acc


def dbscan_labels(X, double eps, Py_ssize_t min_pts):
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0], d = Xv.shape[1]
    cdef cnp.int64_t[::1] labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return np.asarray(labels)
    cdef cnp.int64_t[::1] counts = np.zeros(n, dtype=np.int64)
    cdef cnp.uint8_t[::1] core = np.zeros(n, dtype=np.uint8)
    cdef cnp.int64_t[::1] stack = np.empty(n, dtype=np.int64)
    cdef double eps2 = eps * eps
    cdef Py_ssize_t i, j, u, top
    cdef cnp.int64_t label = 0

    with nogil:
        for i in range(n):
            counts[i] += 1
            for j in range(i + 1, n):
                if _sqdist(Xv, i, j, d) <= eps2:
                    counts[i] += 1
                    counts[j] += 1
        for i in range(n):
            core[i] = counts[i] >= min_pts

        for i in range(n):
            if not core[i] or labels[i] >= 0:
                continue
            labels[i] = label
            stack[0] = i
            top = 1
            while top > 0:
                top -= 1
                u = stack[top]
                for j in range(n):
                    if core[j] and labels[j] < 0 and _sqdist(Xv, u, j, d) <= eps2:
                        labels[j] = label
                        stack[top] = j
                        top += 1
            label += 1

        for i in range(n):
            if core[i]:
                continue
            for j in range(n):
                if core[j] and _sqdist(Xv, i, j, d) <= eps2:
                    labels[i] = labels[j]
                    break
    return np.asarray(labels)


cdef inline void _corners(const double[:, ::1] B, Py_ssize_t i, double* out) nogil:
    cdef double c = cos(B[i, 6]), s = sin(B[i, 6])
    cdef double hl = 0.5 * B[i, 3], hw = 0.5 * B[i, 4]
    cdef double lx[4]
    cdef double ly[4]
    cdef int k
    lx[0] = hl; ly[0] = -hw
    lx[1] = hl; ly[1] = hw
    lx[2] = -hl; ly[2] = hw
    lx[3] = -hl; ly[3] = -hw
    for k in range(4):
        out[2 * k] = c * lx[k] - s * ly[k] + B[i, 0]
        out[2 * k + 1] = s * lx[k] + c * ly[k] + B[i, 1]


cdef double _bev_intersection(const double[:, ::1] A, Py_ssize_t i,
                              const double[:, ::1] B, Py_ssize_t j) nogil:
    cdef double ra = 0.5 * sqrt(A[i, 3] * A[i, 3] + A[i, 4] * A[i, 4])
    cdef double rb = 0.5 * sqrt(B[j, 3] * B[j, 3] + B[j, 4] * B[j, 4])
    cdef double dx = A[i, 0] - B[j, 0], dy = A[i, 1] - B[j, 1]
    if sqrt(dx * dx + dy * dy) > ra + rb:
        return 0.0
    cdef double ca[8]
    cdef double cb[8]
    cdef double buf0[32]
    cdef double buf1[32]
    cdef double* inp = buf0
    cdef double* outp = buf1
    cdef double* tmp
    cdef int nin = 4, nout, e, k
    cdef double ax, ay, ex, ey, px, py, qx, qy, dp, dq, t, area
    _corners(A, i, ca)
    _corners(B, j, cb)
    for k in range(8):
        inp[k] = ca[k]
    for e in range(4):
        if nin == 0:
            break
        ax = cb[2 * e]
        ay = cb[2 * e + 1]
        ex = cb[2 * ((e + 1) % 4)] - ax
        ey = cb[2 * ((e + 1) % 4) + 1] - ay
        nout = 0
        for k in range(nin):
            if k == 0:
                px = inp[2 * (nin - 1)]
                py = inp[2 * (nin - 1) + 1]
            else:
                px = inp[2 * (k - 1)]
                py = inp[2 * (k - 1) + 1]
            qx = inp[2 * k]
            qy = inp[2 * k + 1]
            dp = ex * (py - ay) - ey * (px - ax)
            dq = ex * (qy - ay) - ey * (qx - ax)
            if dq >= 0.0:
                if dp < 0.0:
                    t = dp / (dp - dq)
                    outp[2 * nout] = px + t * (qx - px)
                    outp[2 * nout + 1] = py + t * (qy - py)
                    nout += 1
                outp[2 * nout] = qx
                outp[2 * nout + 1] = qy
                nout += 1
            elif dp >= 0.0:
                t = dp / (dp - dq)
                outp[2 * nout] = px + t * (qx - px)
                outp[2 * nout + 1] = py + t * (qy - py)
                nout += 1
        tmp = inp
        inp = outp
        outp = tmp
        nin = nout
    if nin < 3:
        return 0.0
    area = 0.0
    for k in range(nin):
        e = (k + 1) % nin
        area += inp[2 * k] * inp[2 * e + 1] - inp[2 * e] * inp[2 * k + 1]
    return fabs(0.5 * area)


def bev_intersection(a, b):
    cdef const double[:, ::1] A = np.ascontiguousarray(np.atleast_2d(a), dtype=np.float64)
    cdef const double[:, ::1] B = np.ascontiguousarray(np.atleast_2d(b), dtype=np.float64)
    return _bev_intersection(A, 0, B, 0)


def _as_boxes(arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 7))
    return np.ascontiguousarray(np.atleast_2d(arr))


def iou_matrix(A, B, bint use_3d=False):
    cdef const double[:, ::1] Av = _as_boxes(A)
    cdef const double[:, ::1] Bv = _as_boxes(B)
    cdef Py_ssize_t n = Av.shape[0], m = Bv.shape[0], i, j
    out_arr = np.zeros((n, m))
    cdef double[:, ::1] out = out_arr
    cdef double inter, union, top, bot, dz
    with nogil:
        for i in range(n):
            for j in range(m):
                inter = _bev_intersection(Av, i, Bv, j)
                if inter <= 0.0:
                    continue
                if use_3d:
                    top = fmin(Av[i, 2] + 0.5 * Av[i, 5], Bv[j, 2] + 0.5 * Bv[j, 5])
                    bot = fmax(Av[i, 2] - 0.5 * Av[i, 5], Bv[j, 2] - 0.5 * Bv[j, 5])
                    dz = top - bot
                    if dz <= 0.0:
                        continue
                    inter = inter * dz
                    union = (Av[i, 3] * Av[i, 4] * Av[i, 5]
                             + Bv[j, 3] * Bv[j, 4] * Bv[j, 5] - inter)
                else:
                    union = Av[i, 3] * Av[i, 4] + Bv[j, 3] * Bv[j, 4] - inter
                out[i, j] = fmin(1.0, fmax(0.0, inter / union))
    return out_arr


def jerk_loss_grad(X, X_obs, lengths, double beta, double dt):
    cdef const double[:, :, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, :, ::1] Ov = np.ascontiguousarray(X_obs, dtype=np.float64)
    cdef const cnp.int64_t[::1] Lv = np.ascontiguousarray(lengths, dtype=np.int64)
    cdef Py_ssize_t n = Xv.shape[0], tmax = Xv.shape[1], k, i, c, T
    losses_arr = np.zeros(n)
    grad_arr = np.zeros((n, tmax, 3))
    cdef double[::1] losses = losses_arr
    cdef double[:, :, ::1] grad = grad_arr
    cdef double inv = 1.0 / (dt * dt * dt * dt)
    cdef double res, r, g, acc
    with nogil:
        for k in range(n):
            T = Lv[k]
            acc = 0.0
            for i in range(T):
                for c in range(3):
                    res = Xv[k, i, c] - Ov[k, i, c]
                    acc += beta * res * res
                    grad[k, i, c] = 2.0 * beta * res
            for i in range(T - 4):
                for c in range(3):
                    r = inv * (Xv[k, i, c] - 4.0 * Xv[k, i + 1, c] + 6.0 * Xv[k, i + 2, c]
                               - 4.0 * Xv[k, i + 3, c] + Xv[k, i + 4, c])
                    acc += r * r
                    g = 2.0 * inv * r
                    grad[k, i, c] += g
                    grad[k, i + 1, c] -= 4.0 * g
                    grad[k, i + 2, c] += 6.0 * g
                    grad[k, i + 3, c] -= 4.0 * g
                    grad[k, i + 4, c] += g
            losses[k] = acc
    return losses_arr, grad_arr
