"""Numba-jitted kernels: direct convolution loops and max pooling.

Every output element is accumulated in a float64 scalar and cast back to
the array dtype on store. Zero padding is handled by bounds checks, so no
padded copy is materialized. Single-threaded by design: the training loop
relies on run-to-run bit determinism.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d_forward(x, w, sh, sw, ph, pw, dh, dw, groups):
    b, cin, h, wi = x.shape
    cout, cig, kh, kw = w.shape
    cog = cout // groups
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (wi + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    out = np.empty((b, cout, ho, wo), dtype=x.dtype)
    for n in range(b):
        for o in range(cout):
            ci0 = (o // cog) * cig
            for oh in range(ho):
                for ow in range(wo):
                    acc = 0.0
                    for ci in range(cig):
                        for m in range(kh):
                            ih = oh * sh - ph + m * dh
                            if ih < 0 or ih >= h:
                                continue
                            for kn in range(kw):
                                iw = ow * sw - pw + kn * dw
                                if iw < 0 or iw >= wi:
                                    continue
                                acc += np.float64(w[o, ci, m, kn]) * \
                                    np.float64(x[n, ci0 + ci, ih, iw])
                    out[n, o, oh, ow] = acc
    return out


@njit(cache=True)
def conv2d_backward_input(dy, w, h, wi, sh, sw, ph, pw, dh, dw, groups):
    b, cout, ho, wo = dy.shape
    cig = w.shape[1]
    kh = w.shape[2]
    kw = w.shape[3]
    cog = cout // groups
    cin = cig * groups
    dx = np.zeros((b, cin, h, wi), dtype=np.float64)
    for n in range(b):
        for o in range(cout):
            ci0 = (o // cog) * cig
            for oh in range(ho):
                for ow in range(wo):
                    gy = np.float64(dy[n, o, oh, ow])
                    for ci in range(cig):
                        for m in range(kh):
                            ih = oh * sh - ph + m * dh
                            if ih < 0 or ih >= h:
                                continue
                            for kn in range(kw):
                                iw = ow * sw - pw + kn * dw
                                if iw < 0 or iw >= wi:
                                    continue
                                dx[n, ci0 + ci, ih, iw] += gy * np.float64(w[o, ci, m, kn])
    return dx.astype(dy.dtype)


@njit(cache=True)
def conv2d_backward_kernel(dy, x, kh, kw, sh, sw, ph, pw, dh, dw, groups):
    b, cout, ho, wo = dy.shape
    cin = x.shape[1]
    h = x.shape[2]
    wi = x.shape[3]
    cig = cin // groups
    cog = cout // groups
    dw_out = np.zeros((cout, cig, kh, kw), dtype=np.float64)
    for n in range(b):
        for o in range(cout):
            ci0 = (o // cog) * cig
            for oh in range(ho):
                for ow in range(wo):
                    gy = np.float64(dy[n, o, oh, ow])
                    for ci in range(cig):
                        for m in range(kh):
                            ih = oh * sh - ph + m * dh
                            if ih < 0 or ih >= h:
                                continue
                            for kn in range(kw):
                                iw = ow * sw - pw + kn * dw
                                if iw < 0 or iw >= wi:
                                    continue
                                dw_out[o, ci, m, kn] += gy * np.float64(x[n, ci0 + ci, ih, iw])
    return dw_out.astype(dy.dtype)


@njit(cache=True)
def maxpool2d_forward(x, kh, kw, sh, sw):
    b, c, h, w = x.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    out = np.empty((b, c, ho, wo), dtype=x.dtype)
    switches = np.empty((b, c, ho, wo), dtype=np.int64)
    for n in range(b):
        for ci in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    h0 = oh * sh
                    w0 = ow * sw
                    best = x[n, ci, h0, w0]
                    bidx = h0 * w + w0
                    for m in range(kh):
                        for kn in range(kw):
                            v = x[n, ci, h0 + m, w0 + kn]
                            # strict > keeps the first maximum in scan order
                            if v > best:
                                best = v
                                bidx = (h0 + m) * w + (w0 + kn)
                    out[n, ci, oh, ow] = best
                    switches[n, ci, oh, ow] = bidx
    return out, switches


@njit(cache=True)
def maxpool2d_backward(dy, switches, h, w):
    b, c, ho, wo = dy.shape
    dx = np.zeros((b, c, h, w), dtype=dy.dtype)
    for n in range(b):
        for ci in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    fl = switches[n, ci, oh, ow]
                    dx[n, ci, fl // w, fl % w] += dy[n, ci, oh, ow]
    return dx
