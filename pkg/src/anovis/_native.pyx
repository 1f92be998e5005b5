# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled conv kernels: the hot inner loop of detector/embedder training.

Layout is NHWC with weights (kh, kw, c_in, c_out), so the innermost loops
run over the contiguous channel axis and vectorise. Semantics mirror
``anovis.nn._py_kernels`` exactly; the backend is chosen once at import in
``anovis.nn.kernels``. Everything is serial, making results bitwise
reproducible regardless of the thread environment.
"""

import numpy as np

cimport numpy as cnp

ctypedef fused real:
    float
    double


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[::1] b,
                   int stride, int pad):
    cdef Py_ssize_t n_img = x.shape[0], h = x.shape[1], wid = x.shape[2], c_in = x.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], c_out = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wid + 2 * pad - kw) // stride + 1
    y_arr = np.empty((n_img, ho, wo, c_out),
                     dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t n, oy, ox, ky, kx, ci, f, iy, ix
    cdef real xv
    cdef real* yp
    cdef const real* xp
    cdef const real* wp
    with nogil:
        for n in range(n_img):
            for oy in range(ho):
                for ox in range(wo):
                    yp = &y[n, oy, ox, 0]
                    for f in range(c_out):
                        yp[f] = b[f]
                    for ky in range(kh):
                        iy = oy * stride - pad + ky
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(kw):
                            ix = ox * stride - pad + kx
                            if ix < 0 or ix >= wid:
                                continue
                            xp = &x[n, iy, ix, 0]
                            for ci in range(c_in):
                                xv = xp[ci]
                                wp = &w[ky, kx, ci, 0]
                                for f in range(c_out):
                                    yp[f] += xv * wp[f]
    return y_arr


def conv2d_backward_input(real[:, :, :, ::1] gy, real[:, :, :, ::1] w,
                          int stride, int pad, Py_ssize_t h, Py_ssize_t wid):
    cdef Py_ssize_t n_img = gy.shape[0], ho = gy.shape[1], wo = gy.shape[2]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], c_in = w.shape[2], c_out = w.shape[3]
    gx_arr = np.zeros((n_img, h, wid, c_in),
                      dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] gx = gx_arr
    # transpose taps to (kh, kw, c_out, c_in) so the inner loop is contiguous
    wt_arr = np.ascontiguousarray(np.swapaxes(np.asarray(w), 2, 3))
    cdef real[:, :, :, ::1] wt = wt_arr
    cdef Py_ssize_t n, oy, ox, ky, kx, ci, f, iy, ix
    cdef real gv
    cdef real* xp
    cdef const real* gp
    cdef const real* wp
    with nogil:
        for n in range(n_img):
            for oy in range(ho):
                for ox in range(wo):
                    gp = &gy[n, oy, ox, 0]
                    for ky in range(kh):
                        iy = oy * stride - pad + ky
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(kw):
                            ix = ox * stride - pad + kx
                            if ix < 0 or ix >= wid:
                                continue
                            xp = &gx[n, iy, ix, 0]
                            for f in range(c_out):
                                gv = gp[f]
                                wp = &wt[ky, kx, f, 0]
                                for ci in range(c_in):
                                    xp[ci] += gv * wp[ci]
    return gx_arr


def conv2d_backward_weight(real[:, :, :, ::1] gy, real[:, :, :, ::1] x,
                           Py_ssize_t kh, Py_ssize_t kw, int stride, int pad):
    cdef Py_ssize_t n_img = gy.shape[0], ho = gy.shape[1], wo = gy.shape[2]
    cdef Py_ssize_t h = x.shape[1], wid = x.shape[2], c_in = x.shape[3]
    cdef Py_ssize_t c_out = gy.shape[3]
    gw_arr = np.zeros((kh, kw, c_in, c_out),
                      dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t n, oy, ox, ky, kx, ci, f, iy, ix
    cdef real xv
    cdef real* gwp
    cdef const real* gp
    cdef const real* xp
    with nogil:
        for n in range(n_img):
            for oy in range(ho):
                for ox in range(wo):
                    gp = &gy[n, oy, ox, 0]
                    for ky in range(kh):
                        iy = oy * stride - pad + ky
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(kw):
                            ix = ox * stride - pad + kx
                            if ix < 0 or ix >= wid:
                                continue
                            xp = &x[n, iy, ix, 0]
                            for ci in range(c_in):
                                xv = xp[ci]
                                gwp = &gw[ky, kx, ci, 0]
                                for f in range(c_out):
                                    gwp[f] += xv * gp[f]
    return gw_arr
