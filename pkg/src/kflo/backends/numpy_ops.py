"""Pure-numpy kernels: im2col convolution and strided-window pooling.

No numba dependency. Accumulation happens in float64 (inputs are cast
before the contractions) and results are stored back in the input dtype.
"""

import numpy as np


def _out_size(h, w, kh, kw, sh, sw, ph, pw, dh, dw):
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    return ho, wo


def _im2col(x, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo):
    """Gather kernel windows into [b, c, kh, kw, ho, wo], float64."""
    b, c, h, w = x.shape
    if ph or pw:
        xp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
        xp[:, :, ph:ph + h, pw:pw + w] = x
    else:
        xp = x.astype(np.float64)
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=np.float64)
    for m in range(kh):
        for n in range(kw):
            cols[:, :, m, n] = xp[:, :, m * dh:m * dh + sh * ho:sh,
                                  n * dw:n * dw + sw * wo:sw]
    return cols


def conv2d_forward(x, w, sh, sw, ph, pw, dh, dw, groups):
    b, cin, h, wi = x.shape
    cout, cig, kh, kw = w.shape
    cog = cout // groups
    ho, wo = _out_size(h, wi, kh, kw, sh, sw, ph, pw, dh, dw)
    cols = _im2col(x, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo)
    w64 = w.astype(np.float64)
    out = np.empty((b, cout, ho, wo), dtype=x.dtype)
    for g in range(groups):
        cg = cols[:, g * cig:(g + 1) * cig]
        wg = w64[g * cog:(g + 1) * cog]
        yg = np.tensordot(wg, cg, axes=([1, 2, 3], [1, 2, 3]))
        out[:, g * cog:(g + 1) * cog] = yg.transpose(1, 0, 2, 3)
    return out


def conv2d_backward_input(dy, w, h, wi, sh, sw, ph, pw, dh, dw, groups):
    b, cout, ho, wo = dy.shape
    _, cig, kh, kw = w.shape
    cog = cout // groups
    cin = cig * groups
    dy64 = dy.astype(np.float64)
    w64 = w.astype(np.float64)
    dxp = np.zeros((b, cin, h + 2 * ph, wi + 2 * pw), dtype=np.float64)
    for g in range(groups):
        dyg = dy64[:, g * cog:(g + 1) * cog]
        wg = w64[g * cog:(g + 1) * cog]
        # [cig, kh, kw, b, ho, wo]
        dcols = np.tensordot(wg, dyg, axes=([0], [1]))
        for m in range(kh):
            for n in range(kw):
                dxp[:, g * cig:(g + 1) * cig,
                    m * dh:m * dh + sh * ho:sh,
                    n * dw:n * dw + sw * wo:sw] += dcols[:, m, n].transpose(1, 0, 2, 3)
    dx = dxp[:, :, ph:ph + h, pw:pw + wi]
    return np.ascontiguousarray(dx, dtype=dy.dtype)


def conv2d_backward_kernel(dy, x, kh, kw, sh, sw, ph, pw, dh, dw, groups):
    b, cout, ho, wo = dy.shape
    _, cin, h, wi = x.shape
    cig = cin // groups
    cog = cout // groups
    cols = _im2col(x, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo)
    dy64 = dy.astype(np.float64)
    dw_out = np.empty((cout, cig, kh, kw), dtype=dy.dtype)
    for g in range(groups):
        cg = cols[:, g * cig:(g + 1) * cig]
        dyg = dy64[:, g * cog:(g + 1) * cog]
        dw_out[g * cog:(g + 1) * cog] = np.tensordot(
            dyg, cg, axes=([0, 2, 3], [0, 4, 5]))
    return dw_out


def maxpool2d_forward(x, kh, kw, sh, sw):
    b, c, h, w = x.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    s = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, ho, wo, kh, kw),
        strides=(s[0], s[1], s[2] * sh, s[3] * sw, s[2], s[3]),
        writeable=False)
    flat = win.reshape(b, c, ho, wo, kh * kw)
    # argmax takes the first maximum, i.e. the row-major-first element on ties
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    rows = arg // kw
    cols = arg % kw
    oh = np.arange(ho).reshape(1, 1, ho, 1)
    ow = np.arange(wo).reshape(1, 1, 1, wo)
    switches = ((oh * sh + rows) * w + (ow * sw + cols)).astype(np.int64)
    return np.ascontiguousarray(out), switches


def maxpool2d_backward(dy, switches, h, w):
    b, c, ho, wo = dy.shape
    dxf = np.zeros((b, c, h * w), dtype=dy.dtype)
    bi = np.arange(b).reshape(b, 1, 1)
    ci = np.arange(c).reshape(1, c, 1)
    np.add.at(dxf, (bi, ci, switches.reshape(b, c, ho * wo)),
              dy.reshape(b, c, ho * wo))
    return dxf.reshape(b, c, h, w)
