"""Binary container for frozen models.

Layout (little-endian): magic ``BNNF``, u32 version, u8 variant, u8 layout,
input dims as 4 x u32, u32 class count + class table, u32 node count + nodes
(kind byte plus tag-length-value attrs; node name and input names travel as
attrs), u32 tensor count + named tensors (int8 tensors carry f64 scale and
i32 zero point), and a trailing CRC-32 of everything before it. Writing is
deterministic: identical models produce identical bytes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .config import ClassDef, NodesConfig
from .errors import CorruptFileError, FreezeError
from .model import GraphNode, ModelGraph
from .ops import KINDS, OpSpec
from .tensor import Layout, QuantParams

MAGIC = b"BNNF"
VERSION = 1

VARIANTS = ("nchw", "nhwc", "optimized", "quantized")
_LAYOUTS = (Layout.NCHW, Layout.NHWC)

# Inputs of version-1 models are normalized as x / 255 with no offset.
INPUT_SCALE = 1.0 / 255.0

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int8): 2}
_DTYPE_FROM_CODE = {v: k for k, v in _DTYPE_CODES.items()}

# attr tag registry: tag -> (name, codec)
_STR, _INT, _FLOAT, _BOOL, _STRLIST = range(5)
_ATTR_TAGS = {
    1: ("name", _STR),
    2: ("inputs", _STRLIST),
    3: ("stride", _INT),
    4: ("padding", _STR),
    5: ("dilation", _INT),
    6: ("eps", _FLOAT),
    7: ("keep_prob", _FLOAT),
    8: ("window", _INT),
    9: ("fused_relu", _BOOL),
    10: ("out_h", _INT),
    11: ("out_w", _INT),
    12: ("act_scale", _FLOAT),
    13: ("act_zero_point", _INT),
    14: ("decay", _FLOAT),
    15: ("mode", _STR),
    16: ("input_scale", _FLOAT),
    17: ("input_zero_point", _INT),
}
_TAG_BY_NAME = {name: (tag, codec) for tag, (name, codec) in _ATTR_TAGS.items()}


@dataclass
class FrozenModel:
    """Inference-only graph plus everything deployment needs to run it."""

    graph: ModelGraph                       # params hold every weight tensor
    variant: str
    layout: Layout
    input_dims: tuple[int, int, int, int]   # canonical (n, c, h, w)
    classes: tuple[ClassDef, ...]
    nodes: NodesConfig | None               # nodes.yaml travels beside the container
    weight_quant: dict[str, QuantParams] = field(default_factory=dict)
    act_quant: dict[str, QuantParams] = field(default_factory=dict)

    @property
    def input_norm(self) -> tuple[float, float]:
        """(scale, offset): the preprocessing contract baked into version 1."""
        return (INPUT_SCALE, 0.0)

    def validate(self):
        if self.variant not in VARIANTS:
            raise FreezeError(f"unknown variant {self.variant!r}")
        for node in self.graph.nodes:
            if node.op.kind == "dropout":
                raise FreezeError(f"frozen graph still contains dropout node {node.name!r}")
            if node.op.kind == "batch_norm" and node.op.attrs.get("mode") != "infer":
                raise FreezeError(f"batch norm node {node.name!r} not frozen to infer mode")
        if self.variant == "quantized":
            for name, w in self.graph.params.items():
                if w.dtype == np.int8 and name not in self.weight_quant:
                    raise FreezeError(f"int8 tensor {name!r} lacks quantization parameters")


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _encode_attr(codec, value) -> bytes:
    if codec == _STR:
        return str(value).encode("utf-8")
    if codec == _INT:
        return struct.pack("<q", int(value))
    if codec == _FLOAT:
        return struct.pack("<d", float(value))
    if codec == _BOOL:
        return struct.pack("<B", 1 if value else 0)
    if codec == _STRLIST:
        parts = [struct.pack("<I", len(value))]
        parts.extend(_pack_str(v) for v in value)
        return b"".join(parts)
    raise FreezeError(f"unknown attr codec {codec}")


def _decode_attr(codec, payload: bytes):
    if codec == _STR:
        return payload.decode("utf-8")
    if codec == _INT:
        return struct.unpack("<q", payload)[0]
    if codec == _FLOAT:
        return struct.unpack("<d", payload)[0]
    if codec == _BOOL:
        return payload[0] != 0
    if codec == _STRLIST:
        count = struct.unpack("<I", payload[:4])[0]
        off = 4
        out = []
        for _ in range(count):
            n = struct.unpack("<I", payload[off:off + 4])[0]
            off += 4
            out.append(payload[off:off + n].decode("utf-8"))
            off += n
        return tuple(out)
    raise CorruptFileError(f"unknown attr codec {codec}")


def _write_node(node: GraphNode, act_qp: QuantParams | None,
                input_qp: QuantParams | None) -> bytes:
    attrs = dict(node.op.attrs)
    attrs["name"] = node.name
    attrs["inputs"] = tuple(node.inputs)
    if act_qp is not None:
        attrs["act_scale"] = act_qp.scale
        attrs["act_zero_point"] = act_qp.zero_point
    if input_qp is not None:
        attrs["input_scale"] = input_qp.scale
        attrs["input_zero_point"] = input_qp.zero_point
    encoded = []
    for key, value in attrs.items():
        if key not in _TAG_BY_NAME:
            raise FreezeError(f"attr {key!r} of node {node.name!r} is not serializable")
        tag, codec = _TAG_BY_NAME[key]
        payload = _encode_attr(codec, value)
        encoded.append((tag, payload))
    encoded.sort(key=lambda kv: kv[0])
    out = [struct.pack("<B", KINDS.index(node.op.kind)), struct.pack("<I", len(encoded))]
    for tag, payload in encoded:
        out.append(struct.pack("<BI", tag, len(payload)))
        out.append(payload)
    return b"".join(out)


def write_frozen(model: FrozenModel, path):
    model.validate()
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<B", VARIANTS.index(model.variant))
    buf += struct.pack("<B", _LAYOUTS.index(model.layout))
    buf += struct.pack("<4I", *model.input_dims)
    buf += struct.pack("<I", len(model.classes))
    for c in model.classes:
        buf += struct.pack("<I", c.id)
        buf += _pack_str(c.name)
        buf += struct.pack("<3B", *c.color)
    buf += struct.pack("<I", len(model.graph.nodes))
    input_qp = model.act_quant.get("input")
    for i, node in enumerate(model.graph.nodes):
        buf += _write_node(node, model.act_quant.get(node.name),
                           input_qp if i == 0 else None)
    params = model.graph.params
    buf += struct.pack("<I", len(params))
    for name, arr in params.items():
        buf += _pack_str(name)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise FreezeError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        buf += struct.pack("<B", code)
        dims = list(arr.shape) + [1] * (4 - arr.ndim)
        buf += struct.pack("<4I", *dims)
        if code == 2:
            qp = model.weight_quant[name]
            buf += struct.pack("<di", qp.scale, qp.zero_point)
        buf += arr.tobytes(order="C")
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CorruptFileError("container truncated")
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return vals if len(vals) > 1 else vals[0]

    def string(self) -> str:
        n = self.unpack("I")
        return self.take(n).decode("utf-8")


def read_frozen(path) -> FrozenModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CorruptFileError(f"{path}: not a frozen model container")
    want_crc = struct.unpack("<I", data[-4:])[0]
    have_crc = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if want_crc != have_crc:
        raise CorruptFileError(
            f"{path}: checksum mismatch ({have_crc:#010x} != {want_crc:#010x})")
    r = _Reader(data[4:-4])
    version = r.unpack("I")
    if version != VERSION:
        raise CorruptFileError(f"{path}: container version {version}, expected {VERSION}")
    variant = VARIANTS[r.unpack("B")]
    layout = _LAYOUTS[r.unpack("B")]
    input_dims = tuple(r.unpack("4I"))
    classes = []
    for _ in range(r.unpack("I")):
        cid = r.unpack("I")
        name = r.string()
        color = tuple(r.unpack("3B"))
        classes.append(ClassDef(cid, name, color))

    nodes = []
    act_quant: dict[str, QuantParams] = {}
    input_scale = input_zp = None
    for i in range(r.unpack("I")):
        kind = KINDS[r.unpack("B")]
        attrs = {}
        for _ in range(r.unpack("I")):
            tag, length = r.unpack("BI")
            payload = r.take(length)
            if tag not in _ATTR_TAGS:
                raise CorruptFileError(f"{path}: unknown attr tag {tag}")
            name_, codec = _ATTR_TAGS[tag]
            attrs[name_] = _decode_attr(codec, payload)
        node_name = attrs.pop("name")
        inputs = attrs.pop("inputs")
        if "act_scale" in attrs:
            act_quant[node_name] = QuantParams(attrs.pop("act_scale"),
                                               attrs.pop("act_zero_point"))
        if "input_scale" in attrs:
            input_scale = attrs.pop("input_scale")
            input_zp = attrs.pop("input_zero_point")
        nodes.append(GraphNode(node_name, OpSpec(kind, attrs), tuple(inputs)))
    if input_scale is not None:
        act_quant["input"] = QuantParams(input_scale, input_zp)

    params = {}
    weight_quant = {}
    for _ in range(r.unpack("I")):
        name = r.string()
        code = r.unpack("B")
        dims = r.unpack("4I")
        qp = None
        if code == 2:
            scale, zp = r.unpack("di")
            qp = QuantParams(scale, zp)
        dtype = _DTYPE_FROM_CODE[code]
        count = int(np.prod(dims))
        raw = r.take(count * dtype.itemsize)
        # vectors were padded to 4 dims on write; kernels stay 4-D anyway
        params[name] = np.frombuffer(raw, dtype=dtype).reshape(dims)
        if qp is not None:
            weight_quant[name] = qp

    graph = ModelGraph(nodes, params, {}, {}, len(classes))
    return FrozenModel(graph, variant, layout, input_dims, tuple(classes),
                       nodes=None, weight_quant=weight_quant, act_quant=act_quant)
