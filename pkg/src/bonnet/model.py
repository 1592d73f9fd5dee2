"""Architecture registry, the shipped encoder-decoder network, and losses.

A ``ModelGraph`` is an ordered list of op nodes plus named parameter/state
arrays. The same graph runs three ways: training (recorded on a tape for
backprop, optionally with activation checkpointing), plain inference, and
fake-quantized inference. Five node names are always exposed: ``input``,
``code`` (deepest encoder activation), ``logits``, ``softmax`` and ``argmax``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Tape
from .config import NetConfig
from .errors import ConfigError, ShapeError
from .ops import OpSpec
from .seeding import stable_seed

ROLES = ("input", "code", "logits", "softmax", "argmax")


@dataclass
class GraphNode:
    name: str          # also the name of the node's output value
    op: OpSpec
    inputs: tuple[str, ...]


@dataclass
class ModelGraph:
    nodes: list[GraphNode]
    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray]  # batch-norm running statistics
    named: dict[str, str]         # role -> value name
    num_classes: int
    meta: dict = field(default_factory=dict)

    def node_by_name(self, name: str) -> GraphNode:
        for node in self.nodes:
            if node.name == name:
                return node
        raise ShapeError(f"no node named {name!r}")

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype) -> "ModelGraph":
        return ModelGraph(
            nodes=[GraphNode(n.name, n.op, n.inputs) for n in self.nodes],
            params={k: v.astype(dtype) for k, v in self.params.items()},
            state={k: v.astype(dtype) for k, v in self.state.items()},
            named=dict(self.named),
            num_classes=self.num_classes,
            meta=dict(self.meta),
        )


@dataclass(frozen=True)
class LossSpec:
    class_weights: tuple[float, ...]
    focal_gamma: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.class_weights, dtype=np.float64)
        if not np.all(np.isfinite(w)) or (w <= 0).any():
            raise ConfigError(f"class weights must be finite and positive, got {w}")
        if self.focal_gamma < 0:
            raise ConfigError(f"focal gamma must be >= 0, got {self.focal_gamma}")


def loss(logits: np.ndarray, labels: np.ndarray, spec: LossSpec) -> float:
    """Mean over pixels of w_y * (1 - p_y)^gamma * (-ln p_y)."""
    attrs = {"gamma": spec.focal_gamma,
             "class_weights": np.asarray(spec.class_weights, dtype=logits.dtype)}
    return float(ops.forward("focal_loss", attrs, logits, labels))


# ---------------------------------------------------------------------------
# architecture builder


class _Builder:
    def __init__(self, rng, dtype=np.float32):
        self.rng = rng
        self.dtype = dtype
        self.nodes: list[GraphNode] = []
        self.params: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}

    def _he(self, shape, fan):
        return self.rng.normal(0.0, np.sqrt(2.0 / fan), size=shape).astype(self.dtype)

    def conv(self, name, x, c_in, c_out, kh, kw, stride=1, dilation=1):
        self.params[f"{name}.w"] = self._he((c_out, c_in, kh, kw), c_in * kh * kw)
        self.params[f"{name}.b"] = np.zeros(c_out, dtype=self.dtype)
        spec = OpSpec("conv2d", {"stride": stride, "padding": "same", "dilation": dilation})
        self.nodes.append(GraphNode(name, spec, (x, f"{name}.w", f"{name}.b")))
        return name

    def deconv(self, name, x, c_in, c_out, k=3, stride=2):
        self.params[f"{name}.w"] = self._he((c_in, c_out, k, k), c_in * k * k)
        self.params[f"{name}.b"] = np.zeros(c_out, dtype=self.dtype)
        spec = OpSpec("transposed_conv2d", {"stride": stride})
        self.nodes.append(GraphNode(name, spec, (x, f"{name}.w", f"{name}.b")))
        return name

    def bn(self, name, x, c, decay, eps=1e-5):
        self.params[f"{name}.gamma"] = np.ones(c, dtype=self.dtype)
        self.params[f"{name}.beta"] = np.zeros(c, dtype=self.dtype)
        self.state[f"{name}.running_mean"] = np.zeros(c, dtype=self.dtype)
        self.state[f"{name}.running_var"] = np.ones(c, dtype=self.dtype)
        spec = OpSpec("batch_norm", {"eps": eps, "decay": decay})
        self.nodes.append(GraphNode(name, spec, (
            x, f"{name}.gamma", f"{name}.beta",
            f"{name}.running_mean", f"{name}.running_var")))
        return name

    def relu(self, name, x):
        self.nodes.append(GraphNode(name, OpSpec("relu"), (x,)))
        return name

    def dropout(self, name, x, keep):
        self.nodes.append(GraphNode(name, OpSpec("dropout", {"keep_prob": keep}), (x,)))
        return name

    def pool(self, name, x, window=2, stride=2):
        spec = OpSpec("max_pool2d", {"window": window, "stride": stride, "padding": "same"})
        self.nodes.append(GraphNode(name, spec, (x,)))
        return name

    def concat(self, name, *xs):
        self.nodes.append(GraphNode(name, OpSpec("concat"), tuple(xs)))
        return name

    def add(self, name, x, y):
        self.nodes.append(GraphNode(name, OpSpec("add"), (x, y)))
        return name

    def softmax(self, name, x):
        self.nodes.append(GraphNode(name, OpSpec("softmax"), (x,)))
        return name

    def argmax(self, name, x):
        self.nodes.append(GraphNode(name, OpSpec("argmax"), (x,)))
        return name


def _downsampler(b: _Builder, prefix, x, c_in, c_out, decay):
    """Parallel stride-2 conv and max-pool, channel-concatenated, BN + ReLU."""
    if c_out <= c_in:
        raise ConfigError(
            f"downsampler needs more output than input channels, got {c_in} -> {c_out}")
    conv = b.conv(f"{prefix}.conv", x, c_in, c_out - c_in, 3, 3, stride=2)
    pool = b.pool(f"{prefix}.pool", x)
    cat = b.concat(f"{prefix}.cat", conv, pool)
    bn = b.bn(f"{prefix}.bn", cat, c_out, decay)
    return b.relu(f"{prefix}.relu", bn)


def _non_bt_1d(b: _Builder, prefix, x, ch, dilation, keep, decay):
    """Factorized residual block: 3x1/1x3 pairs, the second pair dilated."""
    h = b.conv(f"{prefix}.c31a", x, ch, ch, 3, 1)
    h = b.relu(f"{prefix}.r1", h)
    h = b.conv(f"{prefix}.c13a", h, ch, ch, 1, 3)
    h = b.bn(f"{prefix}.bn1", h, ch, decay)
    h = b.relu(f"{prefix}.r2", h)
    h = b.conv(f"{prefix}.c31b", h, ch, ch, 3, 1, dilation=dilation)
    h = b.relu(f"{prefix}.r3", h)
    h = b.conv(f"{prefix}.c13b", h, ch, ch, 1, 3, dilation=dilation)
    h = b.bn(f"{prefix}.bn2", h, ch, decay)
    h = b.dropout(f"{prefix}.drop", h, keep)
    h = b.add(f"{prefix}.res", h, x)
    return b.relu(f"{prefix}.out", h)


def build_erfnet_mini(net: NetConfig, num_classes: int, rng) -> ModelGraph:
    b = _Builder(rng)
    keep, decay = net.dropout_keep, net.bn_decay
    stages = list(zip(net.layers_per_stage, net.kernels_per_layer))
    last_stage = len(stages) - 1

    x = "input"
    c_in = 3
    for si, (blocks, ch) in enumerate(stages):
        x = _downsampler(b, f"enc{si}.down", x, c_in, ch, decay)
        for bi in range(blocks):
            dilation = 2 ** (bi % 3) if si == last_stage else 1
            x = _non_bt_1d(b, f"enc{si}.blk{bi}", x, ch, dilation, keep, decay)
        c_in = ch
    code = x

    kernels = list(net.kernels_per_layer)
    for di in range(last_stage, 0, -1):
        up = b.deconv(f"dec{di}.up", x, kernels[di], kernels[di - 1])
        bn = b.bn(f"dec{di}.bn", up, kernels[di - 1], decay)
        x = b.relu(f"dec{di}.relu", bn)
        x = _non_bt_1d(b, f"dec{di}.blk", x, kernels[di - 1], 1, keep, decay)

    b.deconv("logits", x, kernels[0], num_classes)
    b.softmax("softmax", "logits")
    b.argmax("argmax", "softmax")

    named = {"input": "input", "code": code, "logits": "logits",
             "softmax": "softmax", "argmax": "argmax"}
    return ModelGraph(b.nodes, b.params, b.state, named, num_classes,
                      meta={"architecture": net.architecture})


ARCHITECTURES = {
    "erfnet-mini": build_erfnet_mini,
}


def build_architecture(net: NetConfig, num_classes: int, init_seed: int = 0) -> ModelGraph:
    """Instantiate a registered architecture; pure function of its arguments."""
    try:
        builder = ARCHITECTURES[net.architecture]
    except KeyError:
        raise ConfigError(
            f"unknown architecture {net.architecture!r}; "
            f"registered: {sorted(ARCHITECTURES)}", field="architecture") from None
    rng = np.random.Generator(np.random.PCG64(
        stable_seed("init", net.architecture, num_classes, init_seed)))
    return builder(net, num_classes, rng)


# ---------------------------------------------------------------------------
# execution


def _prepared_attrs(node: GraphNode, mode: str, seed_base=None) -> dict:
    attrs = dict(node.op.attrs)
    kind = node.op.kind
    if kind == "batch_norm":
        attrs["mode"] = mode
    elif kind == "dropout":
        attrs["mode"] = mode
        if mode == "train":
            attrs["seed"] = stable_seed("dropout", seed_base, node.name)
    return attrs


def _last_use_index(nodes, stop_at: str | None):
    last = {}
    for i, node in enumerate(nodes):
        for nm in node.inputs:
            last[nm] = i
        if node.name == stop_at:
            break
    return last


def run_training(graph: ModelGraph, x: np.ndarray, tape: Tape, seed_base) -> tuple[dict, dict]:
    """Forward pass recorded on the tape, stopping at the logits node.

    Returns (value-name -> tape id including all parameters, bn-node -> batch
    stats). Batch statistics are collected eagerly so the trainer can update
    running estimates even when activations are checkpointed away.
    """
    ids: dict[str, int] = {"input": tape.leaf(x)}
    for name, p in graph.params.items():
        ids[name] = tape.leaf(p, trainable=True)
    for name, s in graph.state.items():
        ids[name] = tape.leaf(s)

    logits_name = graph.named["logits"]
    last_use = _last_use_index(graph.nodes, logits_name)
    bn_stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    for i, node in enumerate(graph.nodes):
        attrs = _prepared_attrs(node, "train", seed_base)
        in_ids = tuple(ids[nm] for nm in node.inputs)
        if node.op.kind == "batch_norm":
            bn_stats[node.name] = ops.batch_stats(tape.value(in_ids[0]))
        ids[node.name] = tape.record(node.op.kind, attrs, in_ids)
        for nm in node.inputs:
            if last_use.get(nm) == i:
                tape.release(ids[nm])
        if node.name == logits_name:
            break
    return ids, bn_stats


def _parallel_conv(attrs, x, w, b, pool, chunks):
    splits = np.array_split(np.arange(w.shape[0]), chunks)
    futures = [pool.submit(ops.forward, "conv2d", attrs, x, w[s], None if b is None else b[s])
               for s in splits if s.size]
    return np.concatenate([f.result() for f in futures], axis=1)


def run_inference(graph: ModelGraph, x: np.ndarray, wanted=("logits", "softmax", "argmax"),
                  fake_quant: dict | None = None, pool=None) -> dict[str, np.ndarray]:
    """Static forward pass. ``fake_quant`` maps value names to QuantParams and
    simulates 8-bit activation storage between ops; ``pool`` parallelizes
    convolutions over output channels without changing results."""
    from .tensor import fake_quant as fq

    values: dict[str, np.ndarray] = {"input": x}
    if fake_quant and "input" in fake_quant:
        values["input"] = fq(x, fake_quant["input"])
    want_names = {graph.named.get(w, w) for w in wanted}
    targets = set(want_names)
    produced = {}

    def resolve(nm):
        if nm in values:
            return values[nm]
        if nm in graph.params:
            return graph.params[nm]
        return graph.state[nm]

    for node in graph.nodes:
        attrs = _prepared_attrs(node, "infer")
        inputs = [resolve(nm) for nm in node.inputs]
        if pool is not None and node.op.kind == "conv2d" and node.inputs[1] in graph.params:
            out = _parallel_conv(attrs, inputs[0], inputs[1], inputs[2], pool, pool._max_workers)
        else:
            out = ops.forward(node.op.kind, attrs, *inputs)
        if fake_quant and node.name in fake_quant:
            out = fq(out, fake_quant[node.name])
        values[node.name] = out
        if node.name in targets:
            produced[node.name] = out
            if targets.issubset(produced):
                break
    missing = targets - set(produced)
    if missing:
        raise ShapeError(f"graph never produced {sorted(missing)}")
    return {w: produced[graph.named.get(w, w)] for w in wanted}


def softmax_argmax(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel class probabilities and the argmax label map."""
    probs = ops.softmax_channel(logits)
    labels = ops.forward("argmax", {}, probs)
    return probs, labels
