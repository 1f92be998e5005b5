"""NumPy fallback for the conv kernels.

Same contracts as the compiled core in ``anovis._native``: NHWC layout with
(kh, kw, c_in, c_out) weights, C-contiguous float32/float64 arrays, zero
padding. The per-tap slice trick keeps everything vectorised; results match
the compiled loops up to float summation order.
"""

import numpy as np


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, b, stride, pad):
    n, h, wid, _ = x.shape
    kh, kw, _, c_out = w.shape
    ho, wo = _out_size(h, kh, stride, pad), _out_size(wid, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    y = np.zeros((n, ho, wo, c_out), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            window = x[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :]
            y += np.einsum("nhwc,cf->nhwf", window, w[ky, kx], optimize=True)
    y += b
    return y


def conv2d_backward_input(gy, w, stride, pad, h, wid):
    n = gy.shape[0]
    kh, kw, c_in, _ = w.shape
    ho, wo = gy.shape[1], gy.shape[2]
    gx = np.zeros((n, h + 2 * pad, wid + 2 * pad, c_in), dtype=gy.dtype)
    for ky in range(kh):
        for kx in range(kw):
            patch = np.einsum("nhwf,cf->nhwc", gy, w[ky, kx], optimize=True)
            gx[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :] += patch
    if pad:
        gx = gx[:, pad:-pad, pad:-pad, :]
    return np.ascontiguousarray(gx)


def conv2d_backward_weight(gy, x, kh, kw, stride, pad):
    c_in = x.shape[3]
    c_out = gy.shape[3]
    ho, wo = gy.shape[1], gy.shape[2]
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    gw = np.zeros((kh, kw, c_in, c_out), dtype=gy.dtype)
    for ky in range(kh):
        for kx in range(kw):
            window = x[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :]
            gw[ky, kx] = np.einsum("nhwc,nhwf->cf", window, gy, optimize=True)
    return gw
