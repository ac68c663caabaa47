"""Pure-numpy patch extraction kernels (fallback for ``_ckernels``).

Column layout shared with the compiled kernels: row ``(c*kh + i)*kw + j``,
column ``(n*ho + y)*wo + x``. ``col2im`` accumulates kernel offsets in
lexicographic ``(i, j)`` order so both backends agree bitwise.
"""
import numpy as np


def im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    cols = np.ascontiguousarray(cols).reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out
