"""Pure numpy im2col / col2im.

Column matrix layout is channel-major: rows are (c, ki, kj), columns are
(n, oh, ow). A weight tensor (out, c, k, k) reshaped to (out, c*k*k)
left-multiplies it directly.
"""
import numpy as np


def out_extent(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    oh = out_extent(h, k, stride, pad)
    ow = out_extent(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xp = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, oh, ow), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
    return cols.reshape(c * k * k, n * oh * ow)


def col2im(cols, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    oh = out_extent(h, k, stride, pad)
    ow = out_extent(w, k, stride, pad)
    c6 = cols.reshape(c, k, k, n, oh, ow)
    dxp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    # accumulation order (ki, kj) must match the compiled kernel
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += c6[:, ki, kj]
    return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3))
