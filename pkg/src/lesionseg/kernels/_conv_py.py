"""Pure-numpy patch gather/scatter kernels for 2-D convolution.

Fallback backend used when the compiled extension is unavailable. Both
backends produce bit-identical results: the gather is exact and the
scatter accumulates per kernel tap in the same fixed (ki, kj) order.
"""

import numpy as np

BACKEND = "python"


def im2col(x, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow):
    """Gather sliding-window patches of ``x`` (n, c, h, w) into columns.

    Returns an array of shape (n, c*kh*kw, oh*ow).
    """
    n, c, h, w = x.shape
    if ph or pw:
        xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        xp[:, :, ph:ph + h, pw:pw + w] = x
    else:
        xp = x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = xp[
                :, :,
                ki * dh:ki * dh + sh * oh:sh,
                kj * dw:kj * dw + sw * ow:sw,
            ]
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im(cols, n, c, h, w, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow):
    """Scatter-add columns back onto an (n, c, h, w) array.

    Exact adjoint of :func:`im2col`; accumulation order over kernel taps
    is fixed for determinism.
    """
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            xp[
                :, :,
                ki * dh:ki * dh + sh * oh:sh,
                kj * dw:kj * dw + sw * ow:sw,
            ] += cols[:, :, ki, kj]
    if ph or pw:
        return np.ascontiguousarray(xp[:, :, ph:ph + h, pw:pw + w])
    return xp
