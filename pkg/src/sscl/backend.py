"""Hot numeric kernels: 2-D convolution forward/backward.

Two interchangeable implementations are provided:

* a numba ``@njit`` direct-loop kernel set (default when numba imports), and
* a pure-numpy fallback built on strided views + tensordot.

Selection is controlled by the environment variable ``SSCL_NUMBA``:
set ``SSCL_NUMBA=0`` to force the numpy path. ``benchmarks/bench_conv.py``
compares the two.

All kernels implement *valid* convolution (no implicit padding); padding is
applied explicitly by the caller. Layout is NCHW, kernels are (Cout, Cin,
kh, kw). Everything is deterministic: no parallel reductions, no threading.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import as_strided

_USE_NUMBA = os.environ.get("SSCL_NUMBA", "1") != "0"

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False
    _USE_NUMBA = False


def active_backend() -> str:
    return "numba" if (_USE_NUMBA and HAS_NUMBA) else "numpy"


# ---------------------------------------------------------------------------
# pure-numpy kernels


def _conv2d_np(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    v = as_strided(x, (n, ci, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride))
    out = np.tensordot(w, v, axes=([1, 2, 3], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _conv2d_dw_np(x: np.ndarray, gy: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, ci, h, wd = x.shape
    ho, wo = gy.shape[2], gy.shape[3]
    s0, s1, s2, s3 = x.strides
    v = as_strided(x, (n, ci, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride))
    # (Cout, Cin, kh, kw)
    return np.tensordot(gy, v, axes=([0, 2, 3], [0, 4, 5]))


# ---------------------------------------------------------------------------
# numba kernels

if HAS_NUMBA:

    @njit(cache=True, fastmath=True)
    def _im2col(x, b, kh, kw, stride, ho, wo, cols):
        ci = x.shape[1]
        for c in range(ci):
            for ky in range(kh):
                for kx in range(kw):
                    j = (c * kh + ky) * kw + kx
                    for y in range(ho):
                        base = y * wo
                        xrow = x[b, c, y * stride + ky]
                        for xx in range(wo):
                            cols[j, base + xx] = xrow[xx * stride + kx]

    @njit(cache=True, fastmath=True)
    def _conv2d_nb(x, w, stride):
        n, ci, h, wd = x.shape
        co, _, kh, kw = w.shape
        ho = (h - kh) // stride + 1
        wo = (wd - kw) // stride + 1
        k = ci * kh * kw
        wm = np.ascontiguousarray(w.reshape(co, k))
        out = np.empty((n, co, ho, wo), dtype=x.dtype)
        cols = np.empty((k, ho * wo), dtype=x.dtype)
        for b in range(n):
            _im2col(x, b, kh, kw, stride, ho, wo, cols)
            out[b] = np.dot(wm, cols).reshape(co, ho, wo)
        return out

    @njit(cache=True, fastmath=True)
    def _conv2d_dw_nb(x, gy, kh, kw, stride):
        n, ci, h, wd = x.shape
        co = gy.shape[1]
        ho, wo = gy.shape[2], gy.shape[3]
        k = ci * kh * kw
        dwf = np.zeros((co, k), dtype=x.dtype)
        cols = np.empty((k, ho * wo), dtype=x.dtype)
        for b in range(n):
            _im2col(x, b, kh, kw, stride, ho, wo, cols)
            g2 = np.ascontiguousarray(gy[b].reshape(co, ho * wo))
            dwf += np.dot(g2, cols.T)
        return dwf.copy().reshape(co, ci, kh, kw)


# ---------------------------------------------------------------------------
# public API


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid convolution of NCHW input with (Cout,Cin,kh,kw) weights."""
    if _USE_NUMBA and HAS_NUMBA:
        return _conv2d_nb(x, w, stride)
    return _conv2d_np(x, w, stride)


def conv2d_grad_w(x: np.ndarray, gy: np.ndarray, kh: int, kw: int, stride: int = 1) -> np.ndarray:
    """Weight gradient of conv2d given upstream gradient gy."""
    if _USE_NUMBA and HAS_NUMBA:
        return _conv2d_dw_nb(x, gy, kh, kw, stride)
    return _conv2d_dw_np(x, gy, kh, kw, stride)


def conv2d_grad_x(gy: np.ndarray, w: np.ndarray, h: int, wd: int, stride: int = 1) -> np.ndarray:
    """Input gradient of conv2d, expressed as a forward conv on a dilated,
    zero-padded upstream gradient with the transposed, flipped kernel."""
    n, co, ho, wo = gy.shape
    _, ci, kh, kw = w.shape
    # dilate by stride, pad by kernel-1 on each side
    gd = np.zeros((n, co, h + kh - 1, wd + kw - 1), dtype=gy.dtype)
    gd[:, :, kh - 1 : kh - 1 + (ho - 1) * stride + 1 : stride,
       kw - 1 : kw - 1 + (wo - 1) * stride + 1 : stride] = gy
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d(gd, wt, stride=1)
