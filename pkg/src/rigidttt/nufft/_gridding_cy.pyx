# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled gridding kernels: interpolation from and spreading onto an
oversampled grid stored as ``(Gtot, B)`` with Kaiser-Bessel weights.

The kernel weights are real, so complex data is processed as interleaved
float64 pairs (a ``(rows, 2B)`` real view).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor, sqrt

cnp.import_array()

DEF MAXW = 32


cdef inline double _i0(double x) nogil:
    # Polynomial approximations of the modified Bessel function I0 for x >= 0
    # (Abramowitz & Stegun 9.8.1 / 9.8.2, relative error below 2e-7).
    cdef double t, t2
    if x < 3.75:
        t = x / 3.75
        t2 = t * t
        return 1.0 + t2 * (3.5156229 + t2 * (3.0899424 + t2 * (1.2067492 + t2 * (
            0.2659732 + t2 * (0.0360768 + t2 * 0.0045813)))))
    t = 3.75 / x
    return exp(x) / sqrt(x) * (0.39894228 + t * (0.01328592 + t * (0.00225319 + t * (
        -0.00157565 + t * (0.00916281 + t * (-0.02057706 + t * (0.02635537 + t * (
        -0.01647633 + t * 0.00392377))))))))


cdef inline void _weights(double u, Py_ssize_t G, double footprint, double beta,
                          int nw, Py_ssize_t* idx, double* wt) nogil:
    cdef double half = 0.5 * footprint
    cdef double g0 = floor(u - half) + 1.0
    cdef double s, a
    cdef Py_ssize_t g
    cdef int j
    for j in range(nw):
        s = u - (g0 + j)
        a = 1.0 - (2.0 * s / footprint) * (2.0 * s / footprint)
        if a > 0.0:
            wt[j] = _i0(beta * sqrt(a)) - 1.0
        else:
            wt[j] = 0.0
        g = (<Py_ssize_t>(g0 + j)) % G
        if g < 0:
            g += G
        idx[j] = g


def interp(grid, tuple grid_shape, u, double footprint, double beta):
    cdef double[:, ::1] gv = np.ascontiguousarray(grid, dtype=np.complex128).view(np.float64)
    cdef double[:, ::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t M = uv.shape[0]
    cdef int D = uv.shape[1]
    cdef Py_ssize_t B = gv.shape[1]
    out_arr = np.zeros((M, B), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef int nw = <int>floor(footprint) + 1
    if nw > MAXW:
        raise ValueError("kernel footprint too large")
    cdef Py_ssize_t G0 = grid_shape[0]
    cdef Py_ssize_t G1 = grid_shape[1] if D > 1 else 1
    cdef Py_ssize_t G2 = grid_shape[2] if D > 2 else 1
    cdef Py_ssize_t i0[MAXW]
    cdef Py_ssize_t i1[MAXW]
    cdef Py_ssize_t i2[MAXW]
    cdef double w0[MAXW]
    cdef double w1[MAXW]
    cdef double w2[MAXW]
    cdef Py_ssize_t p, b, flat, base0, base1
    cdef int a, c, e
    cdef double w, ww
    with nogil:
        for p in range(M):
            _weights(uv[p, 0], G0, footprint, beta, nw, i0, w0)
            if D == 1:
                for a in range(nw):
                    w = w0[a]
                    if w == 0.0:
                        continue
                    for b in range(B):
                        out[p, b] = out[p, b] + w * gv[i0[a], b]
                continue
            _weights(uv[p, 1], G1, footprint, beta, nw, i1, w1)
            if D == 2:
                for a in range(nw):
                    if w0[a] == 0.0:
                        continue
                    base0 = i0[a] * G1
                    for c in range(nw):
                        w = w0[a] * w1[c]
                        if w == 0.0:
                            continue
                        flat = base0 + i1[c]
                        for b in range(B):
                            out[p, b] = out[p, b] + w * gv[flat, b]
                continue
            _weights(uv[p, 2], G2, footprint, beta, nw, i2, w2)
            for a in range(nw):
                if w0[a] == 0.0:
                    continue
                base0 = i0[a] * G1
                for c in range(nw):
                    ww = w0[a] * w1[c]
                    if ww == 0.0:
                        continue
                    base1 = (base0 + i1[c]) * G2
                    for e in range(nw):
                        w = ww * w2[e]
                        if w == 0.0:
                            continue
                        flat = base1 + i2[e]
                        for b in range(B):
                            out[p, b] = out[p, b] + w * gv[flat, b]
    return out_arr.view(np.complex128)


def spread(samples, tuple grid_shape, u, double footprint, double beta):
    cdef double[:, ::1] sv = np.ascontiguousarray(samples, dtype=np.complex128).view(np.float64)
    cdef double[:, ::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t M = uv.shape[0]
    cdef int D = uv.shape[1]
    cdef Py_ssize_t B = sv.shape[1]
    cdef Py_ssize_t gtot = 1
    for g in grid_shape:
        gtot *= g
    out_arr = np.zeros((gtot, B), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef int nw = <int>floor(footprint) + 1
    if nw > MAXW:
        raise ValueError("kernel footprint too large")
    cdef Py_ssize_t G0 = grid_shape[0]
    cdef Py_ssize_t G1 = grid_shape[1] if D > 1 else 1
    cdef Py_ssize_t G2 = grid_shape[2] if D > 2 else 1
    cdef Py_ssize_t i0[MAXW]
    cdef Py_ssize_t i1[MAXW]
    cdef Py_ssize_t i2[MAXW]
    cdef double w0[MAXW]
    cdef double w1[MAXW]
    cdef double w2[MAXW]
    cdef Py_ssize_t p, b, flat, base0, base1
    cdef int a, c, e
    cdef double w, ww
    with nogil:
        for p in range(M):
            _weights(uv[p, 0], G0, footprint, beta, nw, i0, w0)
            if D == 1:
                for a in range(nw):
                    w = w0[a]
                    if w == 0.0:
                        continue
                    for b in range(B):
                        out[i0[a], b] = out[i0[a], b] + w * sv[p, b]
                continue
            _weights(uv[p, 1], G1, footprint, beta, nw, i1, w1)
            if D == 2:
                for a in range(nw):
                    if w0[a] == 0.0:
                        continue
                    base0 = i0[a] * G1
                    for c in range(nw):
                        w = w0[a] * w1[c]
                        if w == 0.0:
                            continue
                        flat = base0 + i1[c]
                        for b in range(B):
                            out[flat, b] = out[flat, b] + w * sv[p, b]
                continue
            _weights(uv[p, 2], G2, footprint, beta, nw, i2, w2)
            for a in range(nw):
                if w0[a] == 0.0:
                    continue
                base0 = i0[a] * G1
                for c in range(nw):
                    ww = w0[a] * w1[c]
                    if ww == 0.0:
                        continue
                    base1 = (base0 + i1[c]) * G2
                    for e in range(nw):
                        w = ww * w2[e]
                        if w == 0.0:
                            continue
                        flat = base1 + i2[e]
                        for b in range(B):
                            out[flat, b] = out[flat, b] + w * sv[p, b]
    return out_arr.view(np.complex128)
