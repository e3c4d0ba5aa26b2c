"""Independent reference implementations used as test oracles.

Everything here is written with plain Python loops (or the most naive
vectorization possible) and stays independent of the library's kernels,
so a bug cannot cancel itself out.
"""

import math

import numpy as np


def conv2d_naive(x, w, stride=(1, 1), padding=(0, 0), dilation=(1, 1),
                 groups=1):
    """Seven nested loops, float64 accumulation."""
    b, cin, h, wi = x.shape
    cout, cig, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    cog = cout // groups
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (wi + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    out = np.zeros((b, cout, ho, wo), np.float64)
    for n in range(b):
        for o in range(cout):
            ci0 = (o // cog) * cig
            for oh in range(ho):
                for ow in range(wo):
                    acc = 0.0
                    for ci in range(cig):
                        for m in range(kh):
                            for kn in range(kw):
                                ih = oh * sh - ph + m * dh
                                iw = ow * sw - pw + kn * dw
                                if 0 <= ih < h and 0 <= iw < wi:
                                    acc += float(w[o, ci, m, kn]) * \
                                        float(x[n, ci0 + ci, ih, iw])
                    out[n, o, oh, ow] = acc
    return out.astype(x.dtype)


def fc_naive(x, w):
    b, cin = x.shape
    co = w.shape[0]
    out = np.zeros((b, co), np.float64)
    for n in range(b):
        for o in range(co):
            acc = 0.0
            for i in range(cin):
                acc += float(x[n, i]) * float(w[o, i])
            out[n, o] = acc
    return out.astype(x.dtype)


def softmax_ce_naive(logits, labels, reduction="mean"):
    """Two-pass softmax per row, then the negative log likelihood."""
    total = 0.0
    rows = []
    for n in range(logits.shape[0]):
        row = [float(v) for v in logits[n]]
        mx = max(row)
        exps = [math.exp(v - mx) for v in row]
        z = sum(exps)
        p = exps[labels[n]] / z
        rows.append(-math.log(p))
    total = sum(rows)
    return total / len(rows) if reduction == "mean" else total


def ema_naive(initial, values, decay):
    """Recompute an EMA sequence from scratch."""
    s = float(initial)
    for v in values:
        s = decay * s + (1.0 - decay) * float(v)
    return s


def maxpool_naive(x, kh, kw, sh, sw):
    b, c, h, w = x.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    out = np.zeros((b, c, ho, wo), x.dtype)
    for n in range(b):
        for ci in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    out[n, ci, oh, ow] = x[n, ci, oh * sh:oh * sh + kh,
                                           ow * sw:ow * sw + kw].max()
    return out


def rel_dev(a, b):
    """Max-norm relative deviation used across the equivalence checks."""
    return float(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)).max()
                 / (np.abs(np.asarray(b, np.float64)).max() + 1e-8))
