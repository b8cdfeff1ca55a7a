# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Same contracts as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor
from libc.string cimport memcpy, memset

cnp.import_array()

ctypedef fused real:
    float
    double


cdef void _im2col_impl(real* x, real* col, Py_ssize_t B, Py_ssize_t H, Py_ssize_t W,
                       Py_ssize_t C, Py_ssize_t k) noexcept nogil:
    # col row (b,i,j) holds k*k*C values ordered (di, dj, c); for fixed di the
    # k*C values are one contiguous run of the input row, clipped at the edges
    cdef Py_ssize_t p = k // 2
    cdef Py_ssize_t rowlen = k * k * C, runlen = k * C
    cdef Py_ssize_t b, i, j, di, yy, lo, hi
    cdef real* dst
    cdef real* src
    for b in range(B):
        for i in range(H):
            for di in range(k):
                yy = i + di - p
                for j in range(W):
                    dst = col + ((b * H + i) * W + j) * rowlen + di * runlen
                    if yy < 0 or yy >= H:
                        memset(dst, 0, runlen * sizeof(real))
                        continue
                    lo = p - j
                    if lo < 0:
                        lo = 0
                    hi = W + p - j
                    if hi > k:
                        hi = k
                    if lo > 0:
                        memset(dst, 0, lo * C * sizeof(real))
                    if hi < k:
                        memset(dst + hi * C, 0, (k - hi) * C * sizeof(real))
                    src = x + ((b * H + yy) * W + (j + lo - p)) * C
                    memcpy(dst + lo * C, src, (hi - lo) * C * sizeof(real))


cdef void _col2im_impl(real* col, real* out, Py_ssize_t B, Py_ssize_t H, Py_ssize_t W,
                       Py_ssize_t C, Py_ssize_t k) noexcept nogil:
    cdef Py_ssize_t p = k // 2
    cdef Py_ssize_t rowlen = k * k * C, runlen = k * C
    cdef Py_ssize_t b, i, j, di, yy, lo, hi, n, q
    cdef real* src
    cdef real* dst
    for b in range(B):
        for i in range(H):
            for di in range(k):
                yy = i + di - p
                if yy < 0 or yy >= H:
                    continue
                for j in range(W):
                    lo = p - j
                    if lo < 0:
                        lo = 0
                    hi = W + p - j
                    if hi > k:
                        hi = k
                    src = col + ((b * H + i) * W + j) * rowlen + di * runlen + lo * C
                    dst = out + ((b * H + yy) * W + (j + lo - p)) * C
                    n = (hi - lo) * C
                    for q in range(n):
                        dst[q] += src[q]


def im2col(x, int k):
    cdef Py_ssize_t B, H, W, C
    cdef float[::1] xf, cf
    cdef double[::1] xd, cd
    x = np.ascontiguousarray(x)
    B, H, W, C = x.shape
    col = np.empty((B * H * W, k * k * C), dtype=x.dtype)
    if x.dtype == np.float32:
        xf = x.reshape(-1)
        cf = col.reshape(-1)
        with nogil:
            _im2col_impl(&xf[0], &cf[0], B, H, W, C, k)
    elif x.dtype == np.float64:
        xd = x.reshape(-1)
        cd = col.reshape(-1)
        with nogil:
            _im2col_impl(&xd[0], &cd[0], B, H, W, C, k)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return col


def col2im(col, shape, int k):
    cdef Py_ssize_t B, H, W, C
    cdef float[::1] of, cf
    cdef double[::1] od, cd
    col = np.ascontiguousarray(col)
    B, H, W, C = shape
    out = np.zeros((B, H, W, C), dtype=col.dtype)
    if col.dtype == np.float32:
        of = out.reshape(-1)
        cf = col.reshape(-1)
        with nogil:
            _col2im_impl(&cf[0], &of[0], B, H, W, C, k)
    elif col.dtype == np.float64:
        od = out.reshape(-1)
        cd = col.reshape(-1)
        with nogil:
            _col2im_impl(&cd[0], &od[0], B, H, W, C, k)
    else:
        raise TypeError(f"unsupported dtype {col.dtype}")
    return out


def _maxpool_fwd(const real[:, :, :, ::1] x, real[:, :, :, ::1] out, unsigned char[:, :, :, ::1] arg):
    cdef Py_ssize_t B = out.shape[0], Ho = out.shape[1], Wo = out.shape[2], C = out.shape[3]
    cdef Py_ssize_t b, i, j, c
    cdef real best, v
    cdef unsigned char a
    with nogil:
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    for c in range(C):
                        best = x[b, 2 * i, 2 * j, c]
                        a = 0
                        v = x[b, 2 * i, 2 * j + 1, c]
                        if v > best:
                            best = v
                            a = 1
                        v = x[b, 2 * i + 1, 2 * j, c]
                        if v > best:
                            best = v
                            a = 2
                        v = x[b, 2 * i + 1, 2 * j + 1, c]
                        if v > best:
                            best = v
                            a = 3
                        out[b, i, j, c] = best
                        arg[b, i, j, c] = a


def maxpool2_forward(x):
    x = np.ascontiguousarray(x)
    B, H, W, C = x.shape
    out = np.empty((B, H // 2, W // 2, C), dtype=x.dtype)
    arg = np.empty((B, H // 2, W // 2, C), dtype=np.uint8)
    _maxpool_fwd(x, out, arg)
    return out, arg


def _maxpool_bwd(const real[:, :, :, ::1] g, const unsigned char[:, :, :, ::1] arg, real[:, :, :, ::1] out):
    cdef Py_ssize_t B = g.shape[0], Ho = g.shape[1], Wo = g.shape[2], C = g.shape[3]
    cdef Py_ssize_t b, i, j, c
    cdef unsigned char a
    with nogil:
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    for c in range(C):
                        a = arg[b, i, j, c]
                        out[b, 2 * i + (a >> 1), 2 * j + (a & 1), c] = g[b, i, j, c]


def maxpool2_backward(gout, arg, shape):
    gout = np.ascontiguousarray(gout)
    out = np.zeros(shape, dtype=gout.dtype)
    _maxpool_bwd(gout, np.ascontiguousarray(arg), out)
    return out


cdef inline void _corner(real p, Py_ssize_t n, Py_ssize_t* i0, Py_ssize_t* i1, real* f, bint* inside) noexcept nogil:
    cdef real q = p
    inside[0] = (p >= 0) and (p <= n - 1)
    if q < 0:
        q = 0
    elif q > n - 1:
        q = n - 1
    i0[0] = <Py_ssize_t>floor(q)
    i1[0] = i0[0] + 1
    if i1[0] > n - 1:
        i1[0] = n - 1
    f[0] = q - i0[0]


def _bilinear_fwd(const real[:, :, :, ::1] x, const real[:, :, :, ::1] pix, real[:, :, :, ::1] out):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t Ho = pix.shape[1], Wo = pix.shape[2]
    cdef Py_ssize_t b, i, j, c, x0, x1, y0, y1
    cdef real fx, fy, top, bot
    cdef bint inx, iny
    with nogil:
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    _corner(pix[b, i, j, 0], W, &x0, &x1, &fx, &inx)
                    _corner(pix[b, i, j, 1], H, &y0, &y1, &fy, &iny)
                    for c in range(C):
                        top = x[b, y0, x0, c] + fx * (x[b, y0, x1, c] - x[b, y0, x0, c])
                        bot = x[b, y1, x0, c] + fx * (x[b, y1, x1, c] - x[b, y1, x0, c])
                        out[b, i, j, c] = top + fy * (bot - top)


def bilinear_forward(x, pix):
    x = np.ascontiguousarray(x)
    pix = np.ascontiguousarray(pix, dtype=x.dtype)
    out = np.empty(pix.shape[:3] + (x.shape[3],), dtype=x.dtype)
    _bilinear_fwd(x, pix, out)
    return out


def _bilinear_bwd(const real[:, :, :, ::1] x, const real[:, :, :, ::1] pix, const real[:, :, :, ::1] g,
                  real[:, :, :, ::1] gx, real[:, :, :, ::1] gpix, bint need_x, bint need_pix):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t Ho = pix.shape[1], Wo = pix.shape[2]
    cdef Py_ssize_t b, i, j, c, x0, x1, y0, y1
    cdef real fx, fy, go, dpx, dpy, v00, v01, v10, v11
    cdef bint inx, iny
    with nogil:
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    _corner(pix[b, i, j, 0], W, &x0, &x1, &fx, &inx)
                    _corner(pix[b, i, j, 1], H, &y0, &y1, &fy, &iny)
                    dpx = 0
                    dpy = 0
                    for c in range(C):
                        go = g[b, i, j, c]
                        if need_x:
                            gx[b, y0, x0, c] += (1 - fx) * (1 - fy) * go
                            gx[b, y0, x1, c] += fx * (1 - fy) * go
                            gx[b, y1, x0, c] += (1 - fx) * fy * go
                            gx[b, y1, x1, c] += fx * fy * go
                        if need_pix:
                            v00 = x[b, y0, x0, c]
                            v01 = x[b, y0, x1, c]
                            v10 = x[b, y1, x0, c]
                            v11 = x[b, y1, x1, c]
                            dpx += ((1 - fy) * (v01 - v00) + fy * (v11 - v10)) * go
                            dpy += ((v10 + fx * (v11 - v10)) - (v00 + fx * (v01 - v00))) * go
                    if need_pix:
                        gpix[b, i, j, 0] = dpx if inx else 0
                        gpix[b, i, j, 1] = dpy if iny else 0


def bilinear_backward(x, pix, gout, need_x=True, need_pix=True):
    x = np.ascontiguousarray(x)
    pix = np.ascontiguousarray(pix, dtype=x.dtype)
    gout = np.ascontiguousarray(gout, dtype=x.dtype)
    gx = np.zeros(x.shape, dtype=x.dtype)
    gpix = np.zeros(pix.shape, dtype=x.dtype)
    _bilinear_bwd(x, pix, gout, gx, gpix, need_x, need_pix)
    return (gx if need_x else None), (gpix if need_pix else None)
