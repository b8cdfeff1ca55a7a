"""Pure numpy implementations of the hot kernels.

These are the reference fallback for the compiled ``_ckernels`` extension.
Both modules expose the same functions with the same semantics; tests check
them against each other.

Layout is NHWC throughout. Pixel coordinates carry ``(col, row)`` in the last
axis, i.e. ``x`` first.
"""

import numpy as np


def im2col(x, k):
    """Unfold ``x`` (B,H,W,C) into same-padded k x k patches, shape (B*H*W, k*k*C)."""
    B, H, W, C = x.shape
    p = k // 2
    xp = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=x.dtype)
    xp[:, p:p + H, p:p + W, :] = x
    col = np.empty((B, H, W, k, k, C), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            col[:, :, :, i, j, :] = xp[:, i:i + H, j:j + W, :]
    return col.reshape(B * H * W, k * k * C)


def col2im(col, shape, k):
    """Adjoint of :func:`im2col`: scatter-add patch columns back onto (B,H,W,C)."""
    B, H, W, C = shape
    p = k // 2
    col = col.reshape(B, H, W, k, k, C)
    xp = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=col.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, i:i + H, j:j + W, :] += col[:, :, :, i, j, :]
    return np.ascontiguousarray(xp[:, p:p + H, p:p + W, :])


def maxpool2_forward(x):
    B, H, W, C = x.shape
    win = x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(B, H // 2, W // 2, C, 4)
    # argmax returns the first maximum, which is the row-major tie rule
    arg = np.argmax(win, axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward(gout, arg, shape):
    B, H, W, C = shape
    g = np.zeros((B, H // 2, W // 2, C, 4), dtype=gout.dtype)
    np.put_along_axis(g, arg[..., None].astype(np.intp), gout[..., None], axis=-1)
    g = g.reshape(B, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(g.reshape(B, H, W, C))


def _corners(pix, H, W):
    px = np.clip(pix[..., 0], 0.0, W - 1)
    py = np.clip(pix[..., 1], 0.0, H - 1)
    x0 = np.floor(px).astype(np.intp)
    y0 = np.floor(py).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (px - x0).astype(pix.dtype)
    fy = (py - y0).astype(pix.dtype)
    inx = (pix[..., 0] >= 0) & (pix[..., 0] <= W - 1)
    iny = (pix[..., 1] >= 0) & (pix[..., 1] <= H - 1)
    return x0, x1, y0, y1, fx, fy, inx, iny


def bilinear_forward(x, pix):
    """Sample ``x`` (B,H,W,C) at pixel coordinates ``pix`` (B,Ho,Wo,2), clamped."""
    B, H, W, C = x.shape
    x0, x1, y0, y1, fx, fy, _, _ = _corners(pix, H, W)
    b = np.arange(B)[:, None, None]
    v00 = x[b, y0, x0]
    v01 = x[b, y0, x1]
    v10 = x[b, y1, x0]
    v11 = x[b, y1, x1]
    fx = fx[..., None]
    fy = fy[..., None]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return top + fy * (bot - top)


def bilinear_backward(x, pix, gout, need_x=True, need_pix=True):
    B, H, W, C = x.shape
    x0, x1, y0, y1, fx, fy, inx, iny = _corners(pix, H, W)
    b = np.arange(B)[:, None, None]
    gx = gpix = None
    if need_x:
        gx = np.zeros(B * H * W * C, dtype=x.dtype)
        cidx = np.arange(C)
        fx_ = fx[..., None]
        fy_ = fy[..., None]
        weights = (
            ((1 - fx_) * (1 - fy_), y0, x0),
            (fx_ * (1 - fy_), y0, x1),
            ((1 - fx_) * fy_, y1, x0),
            (fx_ * fy_, y1, x1),
        )
        for wgt, yy, xx in weights:
            flat = (((b * H + yy) * W + xx)[..., None] * C + cidx).ravel()
            gx += np.bincount(flat, weights=(wgt * gout).ravel(), minlength=gx.size).astype(x.dtype)
        gx = gx.reshape(B, H, W, C)
    if need_pix:
        v00 = x[b, y0, x0]
        v01 = x[b, y0, x1]
        v10 = x[b, y1, x0]
        v11 = x[b, y1, x1]
        fx_ = fx[..., None]
        fy_ = fy[..., None]
        dpx = ((1 - fy_) * (v01 - v00) + fy_ * (v11 - v10)) * gout
        dpy = ((v10 + fx_ * (v11 - v10)) - (v00 + fx_ * (v01 - v00))) * gout
        gpix = np.empty(pix.shape, dtype=pix.dtype)
        gpix[..., 0] = np.where(inx, dpx.sum(-1), 0)
        gpix[..., 1] = np.where(iny, dpy.sum(-1), 0)
    return gx, gpix
