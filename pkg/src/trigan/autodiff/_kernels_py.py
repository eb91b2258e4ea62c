"""Pure-numpy im2col / col2im, used when the compiled extension is absent."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    N, C, H, W = x.shape
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (OH - 1) * stride + 1 : stride, : (OW - 1) * stride + 1 : stride]
    # (N, C, OH, OW, kh, kw) -> (N, C, kh, kw, OH, OW)
    win = win.transpose(0, 1, 4, 5, 2, 3)
    return np.ascontiguousarray(win).reshape(N, C * kh * kw, OH * OW)


def col2im(cols, C, H, W, kh, kw, stride, pad):
    N = cols.shape[0]
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    if cols.shape[1:] != (C * kh * kw, OH * OW):
        raise ValueError(
            f"col2im: columns shape {cols.shape} does not match "
            f"(N, {C * kh * kw}, {OH * OW})"
        )
    cols = cols.reshape(N, C, kh, kw, OH, OW)
    out = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * OH : stride, j : j + stride * OW : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad : pad + H, pad : pad + W]
    return np.ascontiguousarray(out)
