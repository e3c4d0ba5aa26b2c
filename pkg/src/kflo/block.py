"""Kernel-filtering blocks: expansion, collapse, oracle, MAC accounting.

A filtering layer (conv or fully connected) is trained as a base kernel
followed by a cascade of pointwise channel-mixing kernels. The cascade is
applied to the base kernel itself, reshaped to a 1D signal with one
channel per filter, so the effective deployed kernel is produced before it
ever touches the layer input. Collapsing multiplies the cascade through
and leaves a single kernel with the plain layer's shape; the cascade
weights are then discarded.

For grouped/depthwise layers the base kernel has ``ch_in/groups`` input
channels and the cascade mixes filters within each group only (the
pointwise 1D convolutions run with the same group count), so the
collapse/feature-filtering equivalence holds per group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from . import tensor
from .autodiff import Param, Tape, Var
from .errors import ConfigError, ShapeError, StructureError
from .tensor import DTYPE, TRIVIAL, ConvGeometry


def round_width(x: float) -> int:
    """Round half away from zero; widths are positive so this is floor(x+0.5)."""
    return int(math.floor(x + 0.5))


@dataclass
class KfloBlock:
    """One reparameterized filtering layer.

    ``w1`` is the filtered base kernel ``[mid, ch_in/groups, M, N]``;
    ``cascade`` holds ``depth - 1`` pointwise kernels already in 1D form
    ``[next, cur/groups, 1]``. ``depth`` 1 degenerates to a plain layer
    (empty cascade, w1 is the deployed kernel).
    """

    w1: Param
    cascade: list[Param]
    geom: ConvGeometry
    depth: int
    width_mult: float
    ch_out: int
    _cache: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def ch_in(self) -> int:
        return self.w1.value.shape[1] * self.geom.groups

    @property
    def spatial(self) -> tuple[int, int]:
        return self.w1.value.shape[2], self.w1.value.shape[3]

    def params(self):
        yield self.w1
        yield from self.cascade


def validate_block(block: KfloBlock):
    """Check the cascade width chain; raises StructureError on mismatch."""
    g = block.geom.groups
    cur = block.w1.value.shape[0]
    if cur % g != 0:
        raise StructureError(
            f"{block.w1.name}: {cur} filters not divisible by groups={g}")
    for k in block.cascade:
        if k.value.ndim != 3 or k.value.shape[2] != 1:
            raise StructureError(
                f"{k.name}: cascade kernel must be [cout,cin/g,1], got {k.value.shape}")
        co, cig, _ = k.value.shape
        if cig * g != cur:
            raise StructureError(
                f"{k.name} expects {cig * g} channels but the chain carries {cur}")
        if co % g != 0:
            raise StructureError(
                f"{k.name}: {co} outputs not divisible by groups={g}")
        cur = co
    if cur != block.ch_out:
        raise StructureError(
            f"cascade ends at {cur} channels, deployed layer has {block.ch_out}")


def reshape_kernel_to_signal(w1: np.ndarray) -> np.ndarray:
    """[ch2,ch1,M,N] -> [1,ch2,ch1*M*N]; position t = (M*N)*c + N*m + n."""
    ch2, ch1, m, n = w1.shape
    return w1.reshape(1, ch2, ch1 * m * n)


def reshape_signal_to_kernel(signal: np.ndarray, kernel_shape) -> np.ndarray:
    """Inverse of :func:`reshape_kernel_to_signal`."""
    kernel_shape = tuple(int(s) for s in kernel_shape)
    if signal.ndim != 3 or signal.shape[0] != 1:
        raise ShapeError(f"signal must be [1,ch,L], got {signal.shape}")
    if signal.size != math.prod(kernel_shape):
        raise ShapeError(
            f"signal of {signal.size} values cannot fill kernel {kernel_shape}")
    return signal.reshape(kernel_shape)


def collapse(block: KfloBlock) -> np.ndarray:
    """Multiply the cascade through the base kernel.

    Returns the deployable kernel ``[ch_out, ch_in/groups, M, N]``. Pure
    function of the current parameter values; see :func:`collapsed_kernel`
    for the cached variant used on hot paths.
    """
    validate_block(block)
    w1 = block.w1.value
    signal = reshape_kernel_to_signal(w1)
    for k in block.cascade:
        signal = tensor.pointwise_conv1d(signal, k.value, groups=block.geom.groups)
    return reshape_signal_to_kernel(
        signal, (block.ch_out, w1.shape[1], w1.shape[2], w1.shape[3]))


def collapsed_kernel(block: KfloBlock) -> np.ndarray:
    """Collapse with a cache keyed by parameter versions.

    Valid as long as parameter mutations go through the optimizer (or call
    ``Param.bump()``); used by the no-tape forward path so repeated
    evaluation between steps does not recompute the cascade product.
    """
    key = (block.w1.version, tuple(k.version for k in block.cascade))
    if block._cache is not None and block._cache[0] == key:
        return block._cache[1]
    wp = collapse(block)
    block._cache = (key, wp)
    return wp


def collapse_on_tape(tape: Tape, block: KfloBlock) -> Var:
    """Differentiable collapse: same chain recorded on an autodiff tape."""
    validate_block(block)
    w1 = tape.leaf(block.w1)
    ch2, ch1, m, n = block.w1.value.shape
    signal = ad.reshape(w1, (1, ch2, ch1 * m * n))
    for k in block.cascade:
        signal = ad.pointwise_conv1d(signal, tape.leaf(k),
                                     groups=block.geom.groups)
    return ad.reshape(signal, (block.ch_out, ch1, m, n))


def feature_filter_oracle(x: np.ndarray, block: KfloBlock) -> np.ndarray:
    """Vanilla cascade over feature maps: conv with the base kernel, then
    each cascade kernel as a 1x1 conv. Verification/accounting reference
    only; training never runs this path."""
    y = tensor.conv2d(x, block.w1.value, block.geom)
    pw_geom = ConvGeometry(groups=block.geom.groups)
    for k in block.cascade:
        co, cig, _ = k.value.shape
        y = tensor.conv2d(y, k.value.reshape(co, cig, 1, 1), pw_geom)
    return y


def _fan_in_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(shape[1] * shape[2] * shape[3])
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def _dirac_pointwise(n_out_pg: int, n_in_pg: int, groups: int) -> np.ndarray:
    """Identity channel map per group; modular placement when non-square,
    so every output row selects exactly one input channel."""
    arr = np.zeros((n_out_pg * groups, n_in_pg, 1), dtype=DTYPE)
    for g in range(groups):
        for r in range(n_out_pg):
            arr[g * n_out_pg + r, r % n_in_pg, 0] = 1.0
    return arr


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def expand(ch_out: int, ch_in: int, spatial, geom: ConvGeometry = TRIVIAL,
           depth: int = 1, width_mult: float = 1.0, rng=0,
           name: str = "block") -> KfloBlock:
    """Create a filtering block for a deployed layer of the given shape.

    The base kernel gets the same fan-in-scaled uniform init as the plain
    layer it widens (fan-in from its own shape); cascade kernels start as
    dirac identity maps, so the block initially computes a channel
    selection of the base kernel.
    """
    if depth < 1:
        raise ConfigError(f"depth must be >= 1, got {depth}")
    if width_mult <= 0:
        raise ConfigError(f"width multiplier must be > 0, got {width_mult}")
    g = geom.groups
    if ch_in % g or ch_out % g:
        raise ConfigError(
            f"groups={g} must divide channels ({ch_in} in, {ch_out} out)")
    rng = _as_rng(rng)
    m, n = spatial
    cig = ch_in // g
    out_pg = ch_out // g
    if depth == 1:
        w1 = Param(f"{name}.w1", _fan_in_uniform(rng, (ch_out, cig, m, n)),
                   kind="base_kernel")
        return KfloBlock(w1, [], geom, 1, width_mult, ch_out)
    mid_pg = round_width(width_mult * out_pg)
    if mid_pg == 0:
        raise ConfigError(
            f"width multiplier {width_mult} rounds {out_pg} filters per group "
            f"down to zero")
    w1 = Param(f"{name}.w1", _fan_in_uniform(rng, (mid_pg * g, cig, m, n)),
               kind="base_kernel")
    cascade = []
    for i in range(2, depth + 1):
        nxt_pg = out_pg if i == depth else mid_pg
        cascade.append(Param(f"{name}.pw{i}",
                             _dirac_pointwise(nxt_pg, mid_pg, g),
                             kind="cascade"))
    return KfloBlock(w1, cascade, geom, depth, width_mult, ch_out)


def tl_stack_init(block: KfloBlock, pretrained_kernels: Sequence[np.ndarray]):
    """Warm-start from pretrained deployed kernels.

    Stacks the pretrained kernels along the filter axis of the base kernel
    (per group) and resets the cascade to dirac, so ``collapse(block)``
    equals ``pretrained_kernels[0]`` bit-exactly. Requires the width
    multiplier to be the integer number of pretrained kernels.
    """
    kernels = list(pretrained_kernels)
    if not kernels:
        raise ConfigError("need at least one pretrained kernel")
    if float(len(kernels)) != float(block.width_mult):
        raise ConfigError(
            f"width multiplier {block.width_mult} must equal the number of "
            f"pretrained kernels ({len(kernels)})")
    g = block.geom.groups
    w1 = block.w1.value
    deployed_shape = (block.ch_out, w1.shape[1], w1.shape[2], w1.shape[3])
    for i, k in enumerate(kernels):
        if tuple(k.shape) != deployed_shape:
            raise ShapeError(
                f"pretrained kernel {i} has shape {tuple(k.shape)}, "
                f"deployed layer needs {deployed_shape}")
    out_pg = block.ch_out // g
    mid_pg = w1.shape[0] // g
    if mid_pg != len(kernels) * out_pg:
        raise ConfigError(
            f"base kernel holds {mid_pg} filters per group, cannot stack "
            f"{len(kernels)} x {out_pg}")
    for grp in range(g):
        for k, kern in enumerate(kernels):
            dst = grp * mid_pg + k * out_pg
            w1[dst:dst + out_pg] = kern[grp * out_pg:(grp + 1) * out_pg].astype(w1.dtype)
    block.w1.bump()
    for i, p in enumerate(block.cascade):
        nxt_pg = p.value.shape[0] // g
        p.value[...] = _dirac_pointwise(nxt_pg, mid_pg, g).astype(p.value.dtype)
        p.bump()


class FlopCount(NamedTuple):
    kernel_filtering_macs: int
    feature_filtering_macs: int
    vanilla_macs: int


def flop_count(block: KfloBlock, input_spatial, batch: int = 1) -> FlopCount:
    """Multiply-accumulate counts for one forward pass of the layer.

    Kernel filtering runs the cascade over the reshaped base kernel (a
    signal of length ch_in/g * M * N, batch-independent) plus the deployed
    convolution; feature filtering runs the wide convolution plus the
    cascade over every output position of every sample. Exact integers.
    """
    m, n = block.spatial
    g = block.geom.groups
    ho, wo = block.geom.out_size(input_spatial, (m, n))
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"kernel {m}x{n} does not fit input {input_spatial} with {block.geom}")
    cig = block.w1.value.shape[1]
    positions = batch * ho * wo
    vanilla = positions * block.ch_out * cig * m * n
    conv_w1 = positions * block.w1.value.shape[0] * cig * m * n
    signal_len = cig * m * n
    kf_cascade = 0
    ff_cascade = 0
    cur_pg = block.w1.value.shape[0] // g
    for k in block.cascade:
        nxt_pg = k.value.shape[0] // g
        kf_cascade += g * nxt_pg * cur_pg * signal_len
        ff_cascade += g * nxt_pg * cur_pg * ho * wo * batch
        cur_pg = nxt_pg
    return FlopCount(vanilla + kf_cascade, conv_w1 + ff_cascade, vanilla)
