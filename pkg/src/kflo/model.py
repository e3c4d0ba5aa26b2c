"""Layer graphs: construction, expansion, forward passes, deployment.

A :class:`ModelGraph` is an ordered list of nodes over a declared
per-sample input shape. Filtering nodes (conv2d, fc) carry either a plain
kernel or a :class:`KfloBlock`; a graph in ``deployed`` mode contains no
blocks. Graph-level max pooling is non-overlapping (window == stride),
which covers every architecture built here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import tensor
from .autodiff import Param, Tape, Var
from .block import (KfloBlock, collapse, collapsed_kernel, collapse_on_tape,
                    expand, feature_filter_oracle, flop_count)
from .errors import ConfigError, ShapeError, UsageError
from .tensor import DTYPE, ConvGeometry

KINDS = ("conv2d", "fc", "relu", "maxpool2d", "global_avg_pool")
FILTERING_KINDS = ("conv2d", "fc")

MODE_TRAINING = "training"
MODE_DEPLOYED = "deployed"


@dataclass
class LayerNode:
    kind: str
    name: str
    geom: ConvGeometry | None = None
    kernel: Param | None = None      # plain filtering node
    block: KfloBlock | None = None   # expanded filtering node
    bias: Param | None = None
    pool: tuple[int, int] | None = None  # maxpool window (== stride)

    def is_filtering(self) -> bool:
        return self.kind in FILTERING_KINDS


@dataclass
class ModelGraph:
    input_shape: tuple[int, ...]     # per-sample, e.g. (1, 28, 28)
    nodes: list[LayerNode] = field(default_factory=list)
    mode: str = MODE_TRAINING


def iter_params(graph: ModelGraph):
    for node in graph.nodes:
        if node.kernel is not None:
            yield node.kernel
        if node.block is not None:
            yield from node.block.params()
        if node.bias is not None:
            yield node.bias


def param_count(graph: ModelGraph) -> int:
    return sum(p.value.size for p in iter_params(graph))


def inference_macs(graph: ModelGraph, batch: int = 1) -> int:
    """MACs of one deployed-shape forward pass (filtering nodes only)."""
    total = 0
    for node, in_shape, _ in _iter_with_shapes(graph, batch):
        if node.kind == "conv2d":
            ho, wo = node.geom.out_size(in_shape[2:], _node_spatial(node))
            cig = _node_cig(node)
            total += batch * ho * wo * _node_ch_out(node) * cig * _spatial_size(node)
        elif node.kind == "fc":
            total += batch * _node_ch_out(node) * _node_fan_in(node)
    return total


def training_macs_per_step(graph: ModelGraph, batch: int) -> int:
    """Forward MACs of one kernel-filtering training step at this batch."""
    total = 0
    for node, in_shape, _ in _iter_with_shapes(graph, batch):
        if node.kind == "conv2d":
            if node.block is not None:
                total += flop_count(node.block, in_shape[2:], batch).kernel_filtering_macs
            else:
                ho, wo = node.geom.out_size(in_shape[2:], _node_spatial(node))
                total += batch * ho * wo * _node_ch_out(node) * _node_cig(node) * _spatial_size(node)
        elif node.kind == "fc":
            if node.block is not None:
                total += flop_count(node.block, (1, 1), batch).kernel_filtering_macs
            else:
                total += batch * _node_ch_out(node) * _node_fan_in(node)
    return total


def _node_ch_out(node):
    if node.block is not None:
        return node.block.ch_out
    return node.kernel.value.shape[0]


def _node_cig(node):
    if node.block is not None:
        return node.block.w1.value.shape[1]
    return node.kernel.value.shape[1]


def _node_spatial(node):
    if node.block is not None:
        return node.block.spatial
    return node.kernel.value.shape[2], node.kernel.value.shape[3]


def _spatial_size(node):
    m, n = _node_spatial(node)
    return m * n


def _node_fan_in(node):
    if node.block is not None:
        return node.block.ch_in * _spatial_size(node)
    return node.kernel.value.shape[1]


# ---------------------------------------------------------------------------
# node factories

def conv_node(name: str, ch_in: int, ch_out: int, spatial, geom: ConvGeometry,
              rng, depth: int = 1, width_mult: float = 1.0) -> LayerNode:
    bias = Param(f"{name}.bias", np.zeros(ch_out, dtype=DTYPE), kind="bias")
    if depth == 1:
        blk = expand(ch_out, ch_in, spatial, geom, 1, width_mult, rng, name)
        kernel = Param(f"{name}.kernel", blk.w1.value, kind="plain")
        return LayerNode("conv2d", name, geom=geom, kernel=kernel, bias=bias)
    blk = expand(ch_out, ch_in, spatial, geom, depth, width_mult, rng, name)
    return LayerNode("conv2d", name, geom=geom, block=blk, bias=bias)


def fc_node(name: str, in_features: int, out_features: int, rng,
            depth: int = 1, width_mult: float = 1.0) -> LayerNode:
    bias = Param(f"{name}.bias", np.zeros(out_features, dtype=DTYPE), kind="bias")
    if depth == 1:
        blk = expand(out_features, in_features, (1, 1), tensor.TRIVIAL,
                     1, width_mult, rng, name)
        kernel = Param(f"{name}.kernel",
                       blk.w1.value.reshape(out_features, in_features),
                       kind="plain")
        return LayerNode("fc", name, kernel=kernel, bias=bias)
    blk = expand(out_features, in_features, (1, 1), tensor.TRIVIAL,
                 depth, width_mult, rng, name)
    return LayerNode("fc", name, block=blk, bias=bias)


def relu_node(name: str) -> LayerNode:
    return LayerNode("relu", name)


def maxpool_node(name: str, size: int = 2) -> LayerNode:
    return LayerNode("maxpool2d", name, pool=(size, size))


def gap_node(name: str) -> LayerNode:
    return LayerNode("global_avg_pool", name)


# ---------------------------------------------------------------------------
# shape tracing / validation

def trace_shapes(graph: ModelGraph, batch: int = 1) -> list[tuple[int, ...]]:
    """Output shape after each node for a given batch; validates the graph."""
    return [s for _, _, s in _iter_with_shapes(graph, batch)]


def _iter_with_shapes(graph: ModelGraph, batch: int = 1):
    shape = (batch, *graph.input_shape)
    for node in graph.nodes:
        out = _node_out_shape(node, shape)
        yield node, shape, out
        shape = out


def _node_out_shape(node: LayerNode, in_shape) -> tuple[int, ...]:
    if node.kind == "conv2d":
        if len(in_shape) != 4:
            raise ShapeError(f"{node.name}: conv2d needs rank-4 input, got {in_shape}")
        kshape = (_node_ch_out(node), _node_cig(node), *_node_spatial(node))
        ho, wo = tensor.check_conv_shapes(in_shape, kshape, node.geom)
        return (in_shape[0], _node_ch_out(node), ho, wo)
    if node.kind == "fc":
        feats = math.prod(in_shape[1:])
        if feats != _node_fan_in(node):
            raise ShapeError(
                f"{node.name}: fc expects {_node_fan_in(node)} features, "
                f"input provides {feats}")
        return (in_shape[0], _node_ch_out(node))
    if node.kind == "relu":
        return tuple(in_shape)
    if node.kind == "maxpool2d":
        if len(in_shape) != 4:
            raise ShapeError(f"{node.name}: maxpool2d needs rank-4 input")
        kh, kw = node.pool
        if in_shape[2] < kh or in_shape[3] < kw:
            raise ShapeError(
                f"{node.name}: pool window {node.pool} exceeds input "
                f"{in_shape[2:]} (axes 2,3)")
        return (in_shape[0], in_shape[1], (in_shape[2] - kh) // kh + 1,
                (in_shape[3] - kw) // kw + 1)
    if node.kind == "global_avg_pool":
        if len(in_shape) != 4:
            raise ShapeError(f"{node.name}: global_avg_pool needs rank-4 input")
        return (in_shape[0], in_shape[1])
    raise ConfigError(f"unknown node kind {node.kind!r}")


def validate_graph(graph: ModelGraph):
    names = [n.name for n in graph.nodes]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate node names in graph: {names}")
    if graph.mode == MODE_DEPLOYED and any(n.block for n in graph.nodes):
        raise ConfigError("deployed graph must not carry filtering blocks")
    trace_shapes(graph)


# ---------------------------------------------------------------------------
# builders

def build_lenet5(depth: int = 1, width_mult: float = 1.0, num_classes: int = 10,
                 in_channels: int = 1, seed: int = 0) -> ModelGraph:
    """LeNet-5 for 28x28 inputs; every filtering layer expanded when depth > 1.

    First conv pads by 2 so the trunk reaches the classic 16*5*5 flatten,
    giving the textbook 61,706 parameters at depth 1 with 10 classes.
    """
    rng = np.random.default_rng(seed)
    nodes = [
        conv_node("conv1", in_channels, 6, (5, 5),
                  ConvGeometry(padding=(2, 2)), rng, depth, width_mult),
        relu_node("relu1"),
        maxpool_node("pool1"),
        conv_node("conv2", 6, 16, (5, 5), ConvGeometry(), rng, depth, width_mult),
        relu_node("relu2"),
        maxpool_node("pool2"),
        fc_node("fc1", 16 * 5 * 5, 120, rng, depth, width_mult),
        relu_node("relu3"),
        fc_node("fc2", 120, 84, rng, depth, width_mult),
        relu_node("relu4"),
        fc_node("fc3", 84, num_classes, rng, depth, width_mult),
    ]
    graph = ModelGraph((in_channels, 28, 28), nodes, MODE_TRAINING)
    validate_graph(graph)
    return graph


def build_smallcnn(depth: int = 1, width_mult: float = 1.0,
                   num_classes: int = 10, in_channels: int = 3,
                   seed: int = 0) -> ModelGraph:
    """Three conv-relu-pool stages (32, 64, 128 channels, 3x3, padded),
    global average pooling, one classifier head. Sized for 32x32 inputs."""
    rng = np.random.default_rng(seed)
    pad = ConvGeometry(padding=(1, 1))
    nodes = [
        conv_node("conv1", in_channels, 32, (3, 3), pad, rng, depth, width_mult),
        relu_node("relu1"),
        maxpool_node("pool1"),
        conv_node("conv2", 32, 64, (3, 3), pad, rng, depth, width_mult),
        relu_node("relu2"),
        maxpool_node("pool2"),
        conv_node("conv3", 64, 128, (3, 3), pad, rng, depth, width_mult),
        relu_node("relu3"),
        maxpool_node("pool3"),
        gap_node("gap"),
        fc_node("head", 128, num_classes, rng, depth, width_mult),
    ]
    graph = ModelGraph((in_channels, 32, 32), nodes, MODE_TRAINING)
    validate_graph(graph)
    return graph


BUILDERS = {"lenet5": build_lenet5, "smallcnn": build_smallcnn}


# ---------------------------------------------------------------------------
# forward passes

def _node_kernel_value(node: LayerNode) -> np.ndarray:
    if node.block is not None:
        wp = collapsed_kernel(node.block)
        if node.kind == "fc":
            return wp.reshape(node.block.ch_out, -1)
        return wp
    return node.kernel.value


def forward(graph: ModelGraph, x: np.ndarray) -> np.ndarray:
    """Plain forward pass (no gradients). Training-mode graphs collapse
    their blocks on the fly (cached between optimizer steps)."""
    for node in graph.nodes:
        if node.kind == "conv2d":
            y = tensor.conv2d(x, _node_kernel_value(node), node.geom)
            x = y + node.bias.value.reshape(1, -1, 1, 1)
        elif node.kind == "fc":
            x2 = x.reshape(x.shape[0], -1)
            y = tensor.fc_forward(x2, _node_kernel_value(node))
            x = y + node.bias.value.reshape(1, -1)
        elif node.kind == "relu":
            x = tensor.relu(x)
        elif node.kind == "maxpool2d":
            x = tensor.maxpool2d(x, node.pool)
        elif node.kind == "global_avg_pool":
            x = tensor.global_avg_pool(x)
        else:
            raise ConfigError(f"unknown node kind {node.kind!r}")
    return x


def forward_node(node: LayerNode, x: np.ndarray,
                 path: str = "collapsed") -> np.ndarray:
    """One node's output under a chosen evaluation path.

    ``collapsed`` uses the (cached) collapsed kernel, ``oracle`` runs the
    feature-filtering cascade instead; they only differ on block nodes.
    """
    if node.kind == "conv2d":
        if path == "oracle" and node.block is not None:
            y = feature_filter_oracle(x, node.block)
        else:
            y = tensor.conv2d(x, _node_kernel_value(node), node.geom)
        return y + node.bias.value.reshape(1, -1, 1, 1)
    if node.kind == "fc":
        x2 = x.reshape(x.shape[0], -1)
        if path == "oracle" and node.block is not None:
            y4 = feature_filter_oracle(
                x2.reshape(x2.shape[0], x2.shape[1], 1, 1), node.block)
            y = y4.reshape(x2.shape[0], -1)
        else:
            y = tensor.fc_forward(x2, _node_kernel_value(node))
        return y + node.bias.value.reshape(1, -1)
    if node.kind == "relu":
        return tensor.relu(x)
    if node.kind == "maxpool2d":
        return tensor.maxpool2d(x, node.pool)
    if node.kind == "global_avg_pool":
        return tensor.global_avg_pool(x)
    raise ConfigError(f"unknown node kind {node.kind!r}")


def forward_on_tape(tape: Tape, graph: ModelGraph, x: Var):
    """Training forward: collapse every block on the tape, then apply it.

    Returns (logits, list of collapsed-kernel Vars) so the caller can add
    the deployed-kernel weight-decay term to the loss.
    """
    collapsed: list[Var] = []
    for node in graph.nodes:
        if node.kind == "conv2d":
            if node.block is not None:
                w = collapse_on_tape(tape, node.block)
                collapsed.append(w)
            else:
                w = tape.leaf(node.kernel)
            x = ad.bias_add(ad.conv2d(x, w, node.geom), tape.leaf(node.bias))
        elif node.kind == "fc":
            if node.block is not None:
                w4 = collapse_on_tape(tape, node.block)
                collapsed.append(w4)
                w = ad.reshape(w4, (node.block.ch_out, -1))
            else:
                w = tape.leaf(node.kernel)
            x = ad.bias_add(ad.fc(x, w), tape.leaf(node.bias))
        elif node.kind == "relu":
            x = ad.relu(x)
        elif node.kind == "maxpool2d":
            x = ad.maxpool2d(x, node.pool)
        elif node.kind == "global_avg_pool":
            x = ad.global_avg_pool(x)
        else:
            raise ConfigError(f"unknown node kind {node.kind!r}")
    return x, collapsed


# ---------------------------------------------------------------------------
# deployment / copies

def collapse_model(graph: ModelGraph) -> ModelGraph:
    """Replace every block by its collapsed kernel; returns a deployed
    graph whose forward agrees with the input graph's."""
    if graph.mode != MODE_TRAINING:
        raise UsageError("collapse_model needs a training-mode graph")
    nodes = []
    for node in graph.nodes:
        if node.block is not None:
            wp = collapse(node.block)
            if node.kind == "fc":
                wp = wp.reshape(node.block.ch_out, -1)
            kernel = Param(f"{node.name}.kernel", wp.copy(), kind="plain")
            bias = Param(node.bias.name, node.bias.value.copy(), kind="bias")
            nodes.append(LayerNode(node.kind, node.name, geom=node.geom,
                                   kernel=kernel, bias=bias))
        else:
            nodes.append(_copy_plain_node(node))
    return ModelGraph(graph.input_shape, nodes, MODE_DEPLOYED)


def _copy_plain_node(node: LayerNode) -> LayerNode:
    kernel = bias = None
    if node.kernel is not None:
        kernel = Param(node.kernel.name, node.kernel.value.copy(), kind=node.kernel.kind)
    if node.bias is not None:
        bias = Param(node.bias.name, node.bias.value.copy(), kind=node.bias.kind)
    return LayerNode(node.kind, node.name, geom=node.geom, kernel=kernel,
                     bias=bias, pool=node.pool)


def astype_graph(graph: ModelGraph, dtype) -> ModelGraph:
    """Deep copy with every parameter cast to ``dtype``. Float64 copies are
    what gradient checks run on."""
    nodes = []
    for node in graph.nodes:
        blk = None
        kernel = None
        bias = None
        if node.block is not None:
            b = node.block
            blk = KfloBlock(
                Param(b.w1.name, b.w1.value.astype(dtype), kind=b.w1.kind),
                [Param(p.name, p.value.astype(dtype), kind=p.kind)
                 for p in b.cascade],
                b.geom, b.depth, b.width_mult, b.ch_out)
        if node.kernel is not None:
            kernel = Param(node.kernel.name, node.kernel.value.astype(dtype),
                           kind=node.kernel.kind)
        if node.bias is not None:
            bias = Param(node.bias.name, node.bias.value.astype(dtype),
                         kind=node.bias.kind)
        nodes.append(LayerNode(node.kind, node.name, geom=node.geom,
                               kernel=kernel, block=blk, bias=bias,
                               pool=node.pool))
    return ModelGraph(graph.input_shape, nodes, graph.mode)
