"""Dense tensors and the forward numeric operations everything builds on.

A tensor here is a plain contiguous row-major numpy array in
[batch, channels, spatial...] order, float32 in normal use. Ops validate
shapes eagerly and raise :class:`ShapeError` naming the offending axis.
There is no broadcasting; all shapes are explicit.

Convolutions accumulate each output element in float64 and store the
result in the input dtype. Passing float64 arrays through the same ops is
supported for high-precision verification (gradient checking).

Setting ``KFLO_CHECK_FINITE=1`` turns on a debug assertion that every op
output is free of NaN/Inf.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import backends
from .errors import InputError, ShapeError

DTYPE = np.float32

_CHECK_FINITE = os.environ.get("KFLO_CHECK_FINITE", "") == "1"

# alias for annotations; the value type is a plain ndarray
Tensor = np.ndarray


def as_tensor(values, shape=None) -> Tensor:
    """Build a contiguous float32 tensor, optionally reshaped to `shape`."""
    arr = np.ascontiguousarray(values, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        need = math.prod(shape)
        if arr.size != need:
            raise ShapeError(
                f"data length {arr.size} does not match shape {shape} "
                f"(product {need})")
        arr = arr.reshape(shape)
    return arr


def _finite(out, what):
    if _CHECK_FINITE and not np.isfinite(out).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return out


def _require_rank(t, rank, what):
    if t.ndim != rank:
        raise ShapeError(f"{what} must have rank {rank}, got shape {t.shape}")


def _require_same_dtype(x, w):
    if x.dtype != w.dtype:
        raise TypeError(f"mixed dtypes: {x.dtype} vs {w.dtype}")


@dataclass(frozen=True)
class ConvGeometry:
    """Sliding-window properties of a filtering layer.

    The trivial window is stride 1, padding 0, dilation 1, one group.
    """

    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)
    groups: int = 1

    def out_size(self, input_hw, kernel_hw) -> tuple[int, int]:
        """Closed-form output spatial size for this window."""
        h, w = input_hw
        kh, kw = kernel_hw
        ho = (h + 2 * self.padding[0] - self.dilation[0] * (kh - 1) - 1) \
            // self.stride[0] + 1
        wo = (w + 2 * self.padding[1] - self.dilation[1] * (kw - 1) - 1) \
            // self.stride[1] + 1
        return ho, wo

    def args(self) -> tuple[int, ...]:
        return (self.stride[0], self.stride[1], self.padding[0],
                self.padding[1], self.dilation[0], self.dilation[1],
                self.groups)


TRIVIAL = ConvGeometry()


def check_conv_shapes(x_shape, kernel_shape, geom: ConvGeometry):
    """Validate a conv2d call; returns the output spatial size."""
    b, cin, h, w = x_shape
    cout, cig, kh, kw = kernel_shape
    g = geom.groups
    if g < 1:
        raise ShapeError(f"groups must be >= 1, got {g}")
    if cin % g != 0:
        raise ShapeError(
            f"groups={g} does not divide input channels {cin} (axis 1)")
    if cout % g != 0:
        raise ShapeError(
            f"groups={g} does not divide output channels {cout} (kernel axis 0)")
    if cig * g != cin:
        raise ShapeError(
            f"kernel expects {cig * g} input channels, input has {cin} (axis 1)")
    ho, wo = geom.out_size((h, w), (kh, kw))
    if ho < 1:
        raise ShapeError(
            f"kernel height {kh} does not fit input height {h} "
            f"with {geom} (axis 2)")
    if wo < 1:
        raise ShapeError(
            f"kernel width {kw} does not fit input width {w} "
            f"with {geom} (axis 3)")
    return ho, wo


def conv2d(x: Tensor, kernel: Tensor, geom: ConvGeometry = TRIVIAL) -> Tensor:
    """2D convolution (cross-correlation), [b,cin,H,W] * [cout,cin/g,M,N]."""
    _require_rank(x, 4, "conv2d input")
    _require_rank(kernel, 4, "conv2d kernel")
    _require_same_dtype(x, kernel)
    check_conv_shapes(x.shape, kernel.shape, geom)
    y = backends.conv2d_forward(x, kernel, *geom.args())
    return _finite(y, "conv2d output")


def pointwise_conv1d(x: Tensor, kernel: Tensor, groups: int = 1) -> Tensor:
    """1D pointwise convolution: a channel-mixing matrix applied at every
    position of [b,cin,L]. Kernel shape [cout,cin/g,1]."""
    _require_rank(x, 3, "pointwise_conv1d input")
    _require_rank(kernel, 3, "pointwise_conv1d kernel")
    if kernel.shape[2] != 1:
        raise ShapeError(
            f"pointwise kernel must have spatial size 1, got {kernel.shape[2]} (axis 2)")
    b, cin, length = x.shape
    co, cig, _ = kernel.shape
    y = conv2d(x.reshape(b, cin, 1, length),
               kernel.reshape(co, cig, 1, 1),
               ConvGeometry(groups=groups))
    return y.reshape(b, co, length)


def fc_forward(x: Tensor, weights: Tensor) -> Tensor:
    """Fully connected layer [b,cin] @ [cout,cin]^T, no bias.

    Implemented as conv2d with spatial sizes 1, so it is bit-identical to
    the equivalent 1x1 convolution.
    """
    _require_rank(x, 2, "fc input")
    _require_rank(weights, 2, "fc weights")
    b, cin = x.shape
    co, ci = weights.shape
    if ci != cin:
        raise ShapeError(
            f"fc weights expect {ci} input features, input has {cin} (axis 1)")
    y = conv2d(x.reshape(b, cin, 1, 1), weights.reshape(co, ci, 1, 1))
    return y.reshape(b, co)


def relu(x: Tensor) -> Tensor:
    return _finite(np.maximum(x, x.dtype.type(0)), "relu output")


def maxpool2d(x: Tensor, window=(2, 2), stride=None) -> Tensor:
    """Max pooling, no padding. `stride` defaults to the window size."""
    _require_rank(x, 4, "maxpool2d input")
    kh, kw = window
    sh, sw = stride if stride is not None else window
    if x.shape[2] < kh:
        raise ShapeError(
            f"pool window {kh} exceeds input height {x.shape[2]} (axis 2)")
    if x.shape[3] < kw:
        raise ShapeError(
            f"pool window {kw} exceeds input width {x.shape[3]} (axis 3)")
    y, _ = backends.maxpool2d_forward(x, kh, kw, sh, sw)
    return _finite(y, "maxpool2d output")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes, [b,c,H,W] -> [b,c]."""
    _require_rank(x, 4, "global_avg_pool input")
    y = x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)
    return _finite(y, "global_avg_pool output")


def log_softmax(logits: Tensor) -> np.ndarray:
    """Row-wise log-softmax in float64 with max subtraction."""
    _require_rank(logits, 2, "logits")
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    return z - lse


def softmax_cross_entropy(logits: Tensor, labels, reduction="mean") -> float:
    """Cross-entropy of softmax(logits) against integer labels."""
    labels = np.asarray(labels)
    _require_rank(logits, 2, "logits")
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"labels shape {labels.shape} does not match batch "
            f"{logits.shape[0]} (axis 0)")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise InputError(f"label {bad} out of range [0, {k})")
    if reduction not in ("mean", "sum"):
        raise InputError(f"unknown reduction {reduction!r}")
    lp = log_softmax(logits)
    losses = -lp[np.arange(labels.shape[0]), labels]
    return float(losses.mean() if reduction == "mean" else losses.sum())
