"""Pure-numpy im2col / col2im, used when the compiled extension is missing."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride, pad, ho, wo):
    b, c = x.shape[:2]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (B, C, Ho, Wo, K, K) -> (B, C, K, K, Ho, Wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * k * k, ho * wo)


def col2im(cols, c, h, w, k, stride, pad, ho, wo):
    b = cols.shape[0]
    padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(b, c, k, k, ho, wo)
    for ky in range(k):
        for kx in range(k):
            padded[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += cols6[
                :, :, ky, kx
            ]
    if pad:
        return padded[:, :, pad : pad + h, pad : pad + w].copy()
    return padded
