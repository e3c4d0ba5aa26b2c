"""Bit-exact binary model files.

Layout (all integers little-endian):

    magic "KFLO" | u16 version=1 | u8 mode (0 training, 1 deployed)
    u8 input rank | rank x u32 input dims
    u32 node count
    per node:
        u16 name length | UTF-8 name
        u8 kind (0 conv2d, 1 fc, 2 relu, 3 maxpool2d, 4 global_avg_pool)
        six u32: stride_h, stride_w, pad_h, pad_w, dil_h, dil_w | u32 groups
        u8 param-layout tag: 0 none, 1 plain (kernel, bias),
                             2+k filtering block with k cascade kernels
                             (base kernel, k cascades, bias)
        per tensor: u8 rank | rank x u32 dims | little-endian f32 payload
    u32 CRC32 of everything before it

Max-pool nodes store their window in the stride slots (graph pooling is
non-overlapping). The file is parsed structurally first and the CRC is
verified afterwards, so a payload flip surfaces as a checksum failure and
a shortened file as a truncation failure. The CRC covers the whole file,
so a checksum failure cannot be attributed to a specific layer.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import Param
from .block import KfloBlock
from .errors import (ModelChecksumError, ModelFileError, ModelMagicError,
                     ModelModeError, ModelTruncatedError, ModelVersionError)
from .model import (MODE_DEPLOYED, MODE_TRAINING, LayerNode, ModelGraph,
                    validate_graph)
from .tensor import DTYPE, ConvGeometry

MAGIC = b"KFLO"
VERSION = 1

_KIND_CODES = {"conv2d": 0, "fc": 1, "relu": 2, "maxpool2d": 3,
               "global_avg_pool": 4}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}
_MODE_CODES = {MODE_TRAINING: 0, MODE_DEPLOYED: 1}
_CODE_MODES = {v: k for k, v in _MODE_CODES.items()}

_TRIVIAL_GEOM = (1, 1, 0, 0, 1, 1, 1)


def _tensor_bytes(arr: np.ndarray) -> bytes:
    out = [struct.pack("<B", arr.ndim)]
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def _node_geom_ints(node: LayerNode) -> tuple[int, ...]:
    if node.geom is not None:
        return node.geom.args()
    if node.kind == "maxpool2d":
        kh, kw = node.pool
        return (kh, kw, 0, 0, 1, 1, 1)
    return _TRIVIAL_GEOM


def save_model(graph: ModelGraph, path):
    """Serialize a graph; round trips bit-exactly through load_model."""
    validate_graph(graph)
    chunks = [MAGIC, struct.pack("<HB", VERSION, _MODE_CODES[graph.mode])]
    rank = len(graph.input_shape)
    chunks.append(struct.pack(f"<B{rank}I", rank, *graph.input_shape))
    chunks.append(struct.pack("<I", len(graph.nodes)))
    for node in graph.nodes:
        name = node.name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<B", _KIND_CODES[node.kind]))
        chunks.append(struct.pack("<7I", *_node_geom_ints(node)))
        if node.block is not None:
            k = len(node.block.cascade)
            chunks.append(struct.pack("<B", 2 + k))
            chunks.append(_tensor_bytes(node.block.w1.value))
            for p in node.block.cascade:
                chunks.append(_tensor_bytes(p.value))
            chunks.append(_tensor_bytes(node.bias.value))
        elif node.kernel is not None:
            chunks.append(struct.pack("<B", 1))
            chunks.append(_tensor_bytes(node.kernel.value))
            chunks.append(_tensor_bytes(node.bias.value))
        else:
            chunks.append(struct.pack("<B", 0))
    body = b"".join(chunks)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Cursor:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelTruncatedError(
                f"{self.path}: file ends at byte {len(self.buf)}, "
                f"needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_tensor(cur: _Cursor) -> np.ndarray:
    (rank,) = cur.unpack("<B")
    dims = cur.unpack(f"<{rank}I")
    count = 1
    for d in dims:
        count *= d
    payload = cur.take(4 * count)
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(DTYPE)


def load_model(path, expect_mode: str | None = None) -> ModelGraph:
    """Parse a model file; optionally require a specific mode."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise ModelMagicError(
            f"{path}: not a model file (magic {raw[:4]!r}, expected {MAGIC!r})")
    cur = _Cursor(raw[:-4] if len(raw) >= 8 else raw, path)
    cur.pos = 4
    (version, mode_code) = cur.unpack("<HB")
    if version != VERSION:
        raise ModelVersionError(
            f"{path}: format version {version}, this build reads {VERSION}")
    if mode_code not in _CODE_MODES:
        raise ModelFileError(f"{path}: unknown mode byte {mode_code}")
    mode = _CODE_MODES[mode_code]
    (rank,) = cur.unpack("<B")
    input_shape = cur.unpack(f"<{rank}I")
    (node_count,) = cur.unpack("<I")
    nodes = []
    for _ in range(node_count):
        (name_len,) = cur.unpack("<H")
        name = cur.take(name_len).decode("utf-8")
        (kind_code,) = cur.unpack("<B")
        if kind_code not in _CODE_KINDS:
            raise ModelFileError(f"{path}: node {name!r} has unknown kind "
                                 f"byte {kind_code}")
        kind = _CODE_KINDS[kind_code]
        geom_ints = cur.unpack("<7I")
        (tag,) = cur.unpack("<B")
        nodes.append(_build_node(path, name, kind, geom_ints, tag, cur))
    _verify_crc(path, raw)
    graph = ModelGraph(tuple(int(d) for d in input_shape), nodes, mode)
    validate_graph(graph)
    if expect_mode is not None and mode != expect_mode:
        raise ModelModeError(
            f"{path}: model is in {mode} mode, expected {expect_mode}")
    return graph


def _verify_crc(path, raw: bytes):
    if len(raw) < 8:
        raise ModelTruncatedError(f"{path}: too short to hold a checksum")
    (stored,) = struct.unpack("<I", raw[-4:])
    actual = zlib.crc32(raw[:-4])
    if stored != actual:
        raise ModelChecksumError(
            f"{path}: checksum mismatch (stored {stored:#010x}, "
            f"computed {actual:#010x})")


def _build_node(path, name, kind, geom_ints, tag, cur) -> LayerNode:
    geom = ConvGeometry(stride=(geom_ints[0], geom_ints[1]),
                        padding=(geom_ints[2], geom_ints[3]),
                        dilation=(geom_ints[4], geom_ints[5]),
                        groups=geom_ints[6])
    if tag == 0:
        if kind == "maxpool2d":
            return LayerNode(kind, name, pool=(geom_ints[0], geom_ints[1]))
        return LayerNode(kind, name)
    if tag == 1:
        kernel = Param(f"{name}.kernel", _read_tensor(cur), kind="plain")
        bias = Param(f"{name}.bias", _read_tensor(cur), kind="bias")
        return LayerNode(kind, name, geom=geom if kind == "conv2d" else None,
                         kernel=kernel, bias=bias)
    cascade_count = tag - 2
    w1 = Param(f"{name}.w1", _read_tensor(cur), kind="base_kernel")
    cascade = [Param(f"{name}.pw{i + 2}", _read_tensor(cur), kind="cascade")
               for i in range(cascade_count)]
    bias = Param(f"{name}.bias", _read_tensor(cur), kind="bias")
    ch_out = (cascade[-1].value.shape[0] if cascade else w1.value.shape[0])
    groups = geom.groups
    # width multiplier is not serialized; recover it from the widths
    width_mult = (w1.value.shape[0] // groups) / (ch_out // groups)
    blk = KfloBlock(w1, cascade, geom, depth=cascade_count + 1,
                    width_mult=width_mult, ch_out=ch_out)
    return LayerNode(kind, name, geom=geom if kind == "conv2d" else None,
                     block=blk, bias=bias)
