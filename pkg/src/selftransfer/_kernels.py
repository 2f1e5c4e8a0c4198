"""Compiled loops for the scatter/gather kernels numpy handles poorly.

Each kernel visits window offsets in row-major order, so results are
identical to the strided-slice formulations they replace: max pooling keeps
the first index on ties and col2im adds contributions offset by offset.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def maxpool_forward(x, kernel, stride, oh, ow):
    n, c = x.shape[0], x.shape[1]
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    arg = np.empty((n, c, oh, ow), dtype=np.int32)
    for a in range(n):
        for b in range(c):
            for i in range(oh):
                for j in range(ow):
                    y0, x0 = i * stride, j * stride
                    best = x[a, b, y0, x0]
                    bi = 0
                    for di in range(kernel):
                        for dj in range(kernel):
                            v = x[a, b, y0 + di, x0 + dj]
                            if v > best:
                                best = v
                                bi = di * kernel + dj
                    out[a, b, i, j] = best
                    arg[a, b, i, j] = bi
    return out, arg


@njit(cache=True)
def maxpool_backward(grad, arg, h, w, kernel, stride):
    n, c, oh, ow = grad.shape
    dx = np.zeros((n, c, h, w), dtype=grad.dtype)
    for a in range(n):
        for b in range(c):
            for i in range(oh):
                for j in range(ow):
                    k = arg[a, b, i, j]
                    dx[a, b, i * stride + k // kernel, j * stride + k % kernel] += grad[a, b, i, j]
    return dx


@njit(cache=True)
def col2im(d, hp, wp, kh, kw, stride):
    """``d`` is (n, oh, ow, c, kh*kw); returns padded channels-last (n, hp, wp, c)."""
    n, oh, ow, c, _ = d.shape
    dx = np.zeros((n, hp, wp, c), dtype=d.dtype)
    for a in range(n):
        for i in range(kh):
            for j in range(kw):
                q = i * kw + j
                for y in range(oh):
                    for x in range(ow):
                        yy, xx = y * stride + i, x * stride + j
                        for ch in range(c):
                            dx[a, yy, xx, ch] += d[a, y, x, ch, q]
    return dx
