"""Reverse-mode differentiation over the tensor operations.

A :class:`Tape` records ops in execution order; ``backward`` replays them
in reverse, accumulating gradients with ``+=``. Leaf variables wrap
:class:`Param` objects and write straight into their persistent ``.grad``
buffers, which the caller zeroes explicitly between steps (this is what
lets gradient checks sum several sub-losses onto one buffer).

A tape must stay on one thread from construction through backward;
independent tapes can run concurrently.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from . import backends, tensor
from .errors import ConfigError, DeterminismError, ShapeError, UsageError

PARAM_KINDS = ("base_kernel", "cascade", "plain", "bias")


class Param:
    """Trainable tensor plus persistent gradient buffer and decay class.

    ``kind`` selects the weight-decay rule during training:
    ``base_kernel`` (filtered kernel, no decay), ``cascade`` (pointwise
    cascade, weak decay), ``plain`` (ordinary weight), ``bias``.
    ``version`` increments on every optimizer update so collapsed-kernel
    caches can be invalidated; call :meth:`bump` after mutating ``value``
    by hand.
    """

    __slots__ = ("name", "value", "grad", "kind", "version")

    def __init__(self, name: str, value, kind: str = "plain"):
        if kind not in PARAM_KINDS:
            raise ConfigError(f"unknown param kind {kind!r}")
        self.name = name
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)
        self.kind = kind
        self.version = 0

    def zero_grad(self):
        self.grad[...] = 0

    def bump(self):
        self.version += 1

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape}, kind={self.kind!r})"


class Var:
    """A value on a tape. ``grad`` is allocated lazily on first use."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad, tape):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = tape


def _ensure_grad(v: Var):
    if v.grad is None:
        v.grad = np.zeros_like(v.data)
    return v.grad


def _accumulate(v: Var, g):
    if v.requires_grad:
        _ensure_grad(v)
        v.grad += g


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self._nodes: list[tuple[Var, Callable]] = []

    def input(self, array) -> Var:
        """A constant input (no gradient), e.g. an image batch."""
        return Var(np.ascontiguousarray(array), False, self)

    def leaf(self, param: Param) -> Var:
        """A parameter leaf; backward accumulates into ``param.grad``."""
        v = Var(param.value, True, self)
        v.grad = param.grad
        return v

    def record(self, out: Var, backward_fn: Callable):
        self._nodes.append((out, backward_fn))

    def backward(self, loss: Var):
        """Propagate d(loss)/d(everything) back through the tape."""
        if loss.tape is not self:
            raise UsageError("loss does not belong to this tape")
        if loss.data.size != 1:
            raise UsageError(
                f"backward needs a scalar loss, got shape {loss.data.shape}")
        _ensure_grad(loss)
        loss.grad[...] = 1
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)


def _merge_tape(*vs: Var) -> Tape:
    t = vs[0].tape
    for v in vs[1:]:
        if v.tape is not t:
            raise UsageError("variables belong to different tapes")
    return t


def conv2d(x: Var, w: Var, geom=tensor.TRIVIAL) -> Var:
    t = _merge_tape(x, w)
    y = tensor.conv2d(x.data, w.data, geom)
    out = Var(y, x.requires_grad or w.requires_grad, t)
    if out.requires_grad:
        xd, wd = x.data, w.data
        ga = geom.args()

        def bwd(gy):
            if x.requires_grad:
                _accumulate(x, backends.conv2d_backward_input(
                    gy, wd, xd.shape[2], xd.shape[3], *ga))
            if w.requires_grad:
                _accumulate(w, backends.conv2d_backward_kernel(
                    gy, xd, wd.shape[2], wd.shape[3], *ga))

        t.record(out, bwd)
    return out


def reshape(x: Var, shape) -> Var:
    shape = tuple(int(s) for s in shape)
    out = Var(x.data.reshape(shape), x.requires_grad, x.tape)
    if out.requires_grad:
        orig = x.data.shape

        def bwd(gy):
            _accumulate(x, gy.reshape(orig))

        x.tape.record(out, bwd)
    return out


def pointwise_conv1d(x: Var, w: Var, groups: int = 1) -> Var:
    """Composition of reshapes around conv2d; numerically identical to
    :func:`kflo.tensor.pointwise_conv1d`."""
    if w.data.ndim != 3 or w.data.shape[2] != 1:
        raise ShapeError(
            f"pointwise kernel must be [cout,cin/g,1], got {w.data.shape}")
    b, cin, length = x.data.shape
    co, cig, _ = w.data.shape
    x4 = reshape(x, (b, cin, 1, length))
    w4 = reshape(w, (co, cig, 1, 1))
    y = conv2d(x4, w4, tensor.ConvGeometry(groups=groups))
    return reshape(y, (b, co, length))


def fc(x: Var, w: Var) -> Var:
    """Fully connected layer; flattens non-batch axes of ``x``."""
    b = x.data.shape[0]
    feats = x.data.size // b
    co, ci = w.data.shape
    if ci != feats:
        raise ShapeError(
            f"fc weights expect {ci} input features, input has {feats} (axis 1)")
    x4 = reshape(x, (b, feats, 1, 1))
    w4 = reshape(w, (co, ci, 1, 1))
    y = conv2d(x4, w4)
    return reshape(y, (b, co))


def bias_add(x: Var, b: Var) -> Var:
    t = _merge_tape(x, b)
    c = b.data.shape[0]
    if x.data.ndim == 4:
        if x.data.shape[1] != c:
            raise ShapeError(
                f"bias length {c} does not match {x.data.shape[1]} channels (axis 1)")
        y = x.data + b.data.reshape(1, c, 1, 1)
        axes = (0, 2, 3)
    elif x.data.ndim == 2:
        if x.data.shape[1] != c:
            raise ShapeError(
                f"bias length {c} does not match {x.data.shape[1]} features (axis 1)")
        y = x.data + b.data.reshape(1, c)
        axes = (0,)
    else:
        raise ShapeError(f"bias_add input must be rank 2 or 4, got {x.data.shape}")
    out = Var(y, x.requires_grad or b.requires_grad, t)
    if out.requires_grad:

        def bwd(gy):
            _accumulate(x, gy)
            if b.requires_grad:
                _accumulate(
                    b, gy.sum(axis=axes, dtype=np.float64).astype(b.data.dtype))

        t.record(out, bwd)
    return out


def relu(x: Var) -> Var:
    out = Var(tensor.relu(x.data), x.requires_grad, x.tape)
    if out.requires_grad:
        # subgradient 0 at exactly 0
        mask = x.data > 0

        def bwd(gy):
            _accumulate(x, gy * mask)

        x.tape.record(out, bwd)
    return out


def maxpool2d(x: Var, window=(2, 2), stride=None) -> Var:
    kh, kw = window
    sh, sw = stride if stride is not None else window
    y, switches = backends.maxpool2d_forward(x.data, kh, kw, sh, sw)
    out = Var(y, x.requires_grad, x.tape)
    if out.requires_grad:
        h, w = x.data.shape[2], x.data.shape[3]

        def bwd(gy):
            # ties were routed to the first maximum in row-major scan order
            _accumulate(x, backends.maxpool2d_backward(gy, switches, h, w))

        x.tape.record(out, bwd)
    return out


def global_avg_pool(x: Var) -> Var:
    out = Var(tensor.global_avg_pool(x.data), x.requires_grad, x.tape)
    if out.requires_grad:
        b, c, h, w = x.data.shape

        def bwd(gy):
            _accumulate(x, np.broadcast_to(
                (gy / (h * w))[:, :, None, None], (b, c, h, w)))

        x.tape.record(out, bwd)
    return out


def softmax_cross_entropy(logits: Var, labels, reduction="mean") -> Var:
    labels = np.asarray(labels)
    val = tensor.softmax_cross_entropy(logits.data, labels, reduction)
    dtype = logits.data.dtype
    out = Var(np.asarray(val, dtype=dtype), logits.requires_grad, logits.tape)
    if out.requires_grad:
        probs = np.exp(tensor.log_softmax(logits.data))
        n = logits.data.shape[0]

        def bwd(gy):
            g = probs.copy()
            g[np.arange(n), labels] -= 1.0
            if reduction == "mean":
                g /= n
            _accumulate(logits, (g * float(gy)).astype(dtype))

        logits.tape.record(out, bwd)
    return out


def add(a: Var, b: Var) -> Var:
    t = _merge_tape(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    out = Var(a.data + b.data, a.requires_grad or b.requires_grad, t)
    if out.requires_grad:

        def bwd(gy):
            _accumulate(a, gy)
            _accumulate(b, gy)

        t.record(out, bwd)
    return out


def scale(x: Var, c: float) -> Var:
    out = Var(x.data * x.data.dtype.type(c), x.requires_grad, x.tape)
    if out.requires_grad:

        def bwd(gy):
            _accumulate(x, gy * x.data.dtype.type(c))

        x.tape.record(out, bwd)
    return out


def sum_all(x: Var) -> Var:
    val = x.data.sum(dtype=np.float64)
    out = Var(np.asarray(val, dtype=x.data.dtype), x.requires_grad, x.tape)
    if out.requires_grad:

        def bwd(gy):
            _accumulate(x, np.full_like(x.data, float(gy)))

        x.tape.record(out, bwd)
    return out


def half_sum_squares(x: Var) -> Var:
    """Scalar 0.5 * sum(x^2); the building block of kernel weight decay."""
    xd64 = x.data.astype(np.float64)
    val = 0.5 * (xd64 * xd64).sum()
    out = Var(np.asarray(val, dtype=x.data.dtype), x.requires_grad, x.tape)
    if out.requires_grad:

        def bwd(gy):
            _accumulate(x, x.data * x.data.dtype.type(float(gy)))

        x.tape.record(out, bwd)
    return out


def finite_diff_check(loss_fn: Callable[[], float], params: Iterable[Param],
                      eps: float = 1e-3, coords_per_tensor: int = 32,
                      seed: int = 0) -> dict[str, float]:
    """Compare analytic gradients against central finite differences.

    ``loss_fn()`` must build a fresh tape, run backward, and return the
    scalar loss; the params' ``.grad`` buffers then hold the analytic
    gradients. Samples ``coords_per_tensor`` random coordinates per tensor
    (all of them for small tensors) and returns the max relative error per
    param name. Raises :class:`DeterminismError` if two evaluations of
    ``loss_fn`` disagree.

    Run this on a float64 copy of the model: with float32 storage the
    finite-difference signal drowns in rounding noise long before the
    backward rules are at fault.
    """
    if not 0 < eps <= 1e-1:
        raise ConfigError(f"eps must be in (0, 1e-1], got {eps}")
    params = list(params)

    def run():
        for p in params:
            p.zero_grad()
        return float(loss_fn())

    first, second = run(), run()
    if first != second:
        raise DeterminismError(
            f"loss_fn is not deterministic: {first!r} != {second!r}")
    run()
    analytic = {p.name: p.grad.copy() for p in params}

    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for p in params:
        flat = p.value.reshape(-1)
        n = flat.size
        coords = (np.arange(n) if n <= coords_per_tensor
                  else rng.choice(n, size=coords_per_tensor, replace=False))
        worst = 0.0
        aflat = analytic[p.name].reshape(-1)
        for c in coords:
            old = flat[c]
            flat[c] = old + eps
            lp = run()
            flat[c] = old - eps
            lm = run()
            flat[c] = old
            cd = (lp - lm) / (2 * eps)
            a = float(aflat[c])
            worst = max(worst, abs(a - cd) / max(abs(a), abs(cd), 1e-8))
        report[p.name] = worst
    return report
