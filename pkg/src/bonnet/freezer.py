"""Convert trained checkpoints into the four deployable frozen variants.

``freeze`` strips training-only ops (dropout, batch-statistics updates),
emits the graph in both activation layouts, an optimized build (batch-norm
folding, conv/ReLU fusion, constant folding), and an 8-bit quantized build
calibrated on real data. Named nodes (input/code/logits/softmax/argmax) are
never fused away, so nodes.yaml resolves in every variant.
"""

from __future__ import annotations

import logging
import os
import shutil

import numpy as np

from . import ops
from .config import DataConfig, NodesConfig, load_config, save_config
from .container import FrozenModel, write_frozen
from .dataset import StandardDataset
from .errors import FreezeError
from .model import GraphNode, ModelGraph, run_inference
from .ops import OpSpec
from .seeding import stable_seed
from .tensor import Layout, dequantize_array, quantize_array, weight_qparams
from .trainer import load_checkpoint

log = logging.getLogger("bonnet.freezer")

CALIBRATION_SAMPLES = 16


def strip_training_ops(graph: ModelGraph) -> ModelGraph:
    """Dropout becomes identity (removed); batch norms freeze to infer mode."""
    rename: dict[str, str] = {}
    nodes: list[GraphNode] = []
    for node in graph.nodes:
        inputs = tuple(rename.get(nm, nm) for nm in node.inputs)
        if node.op.kind == "dropout":
            rename[node.name] = inputs[0]
            continue
        attrs = dict(node.op.attrs)
        if node.op.kind == "batch_norm":
            for suffix in ("running_mean", "running_var"):
                if f"{node.name}.{suffix}" not in graph.state:
                    raise FreezeError(
                        f"batch norm {node.name!r} has no populated {suffix}")
            attrs["mode"] = "infer"
            attrs.pop("decay", None)
        nodes.append(GraphNode(node.name, OpSpec(node.op.kind, attrs), inputs))
    params = {k: v.copy() for k, v in graph.params.items()}
    params.update({k: v.copy() for k, v in graph.state.items()})
    named = {role: rename.get(nm, nm) for role, nm in graph.named.items()}
    return ModelGraph(nodes, params, {}, named, graph.num_classes, dict(graph.meta))


def fold_batch_norm(w, b, gamma, beta, mean, var, eps, channel_axis=0):
    """Absorb frozen normalization into conv weights/bias."""
    scale = gamma / np.sqrt(var + eps)
    shape = [1] * w.ndim
    shape[channel_axis] = -1
    w2 = w * scale.reshape(shape)
    b2 = beta + (b - mean) * scale
    return w2.astype(w.dtype), b2.astype(b.dtype)


def _consumers(nodes):
    count: dict[str, int] = {}
    for node in nodes:
        for nm in node.inputs:
            count[nm] = count.get(nm, 0) + 1
    return count


def fold_batch_norm_pass(graph: ModelGraph) -> ModelGraph:
    """Fold every BN whose sole input producer is a conv/deconv it follows."""
    params = {k: v.copy() for k, v in graph.params.items()}
    produced = {n.name: n for n in graph.nodes}
    uses = _consumers(graph.nodes)
    protected = set(graph.named.values())
    rename: dict[str, str] = {}
    nodes: list[GraphNode] = []
    dropped_params: set[str] = set()

    for node in graph.nodes:
        inputs = tuple(rename.get(nm, nm) for nm in node.inputs)
        node = GraphNode(node.name, node.op, inputs)
        if node.op.kind == "batch_norm" and node.name not in protected:
            src = produced.get(node.inputs[0])
            if (src is not None and src.op.kind in ("conv2d", "transposed_conv2d")
                    and uses.get(src.name, 0) == 1 and not src.op.attrs.get("fused_relu")):
                conv = next(n for n in nodes if n.name == src.name)
                axis = 0 if conv.op.kind == "conv2d" else 1
                wname, bname = conv.inputs[1], conv.inputs[2]
                gamma = params[f"{node.name}.gamma"].reshape(-1)
                beta = params[f"{node.name}.beta"].reshape(-1)
                mean = params[f"{node.name}.running_mean"].reshape(-1)
                var = params[f"{node.name}.running_var"].reshape(-1)
                w2, b2 = fold_batch_norm(params[wname], params[bname].reshape(-1),
                                         gamma, beta, mean, var,
                                         node.op.attrs["eps"], axis)
                params[wname] = w2
                params[bname] = b2.reshape(params[bname].shape)
                for suffix in ("gamma", "beta", "running_mean", "running_var"):
                    dropped_params.add(f"{node.name}.{suffix}")
                rename[node.name] = src.name
                continue
        nodes.append(node)

    for name in dropped_params:
        params.pop(name, None)
    named = {role: rename.get(nm, nm) for role, nm in graph.named.items()}
    return ModelGraph(nodes, params, {}, named, graph.num_classes, dict(graph.meta))


def fuse_relu_pass(graph: ModelGraph) -> ModelGraph:
    """Merge conv->relu pairs into the conv node (named relus are kept)."""
    produced = {n.name: n for n in graph.nodes}
    uses = _consumers(graph.nodes)
    protected = set(graph.named.values())
    rename: dict[str, str] = {}
    nodes: list[GraphNode] = []

    for node in graph.nodes:
        inputs = tuple(rename.get(nm, nm) for nm in node.inputs)
        node = GraphNode(node.name, node.op, inputs)
        if node.op.kind == "relu" and node.name not in protected:
            src = produced.get(node.inputs[0])
            if (src is not None and src.op.kind in ("conv2d", "transposed_conv2d")
                    and uses.get(src.name, 0) == 1
                    and not src.op.attrs.get("fused_relu")):
                for i, existing in enumerate(nodes):
                    if existing.name == src.name:
                        attrs = dict(existing.op.attrs)
                        attrs["fused_relu"] = True
                        nodes[i] = GraphNode(existing.name,
                                             OpSpec(existing.op.kind, attrs),
                                             existing.inputs)
                        break
                rename[node.name] = src.name
                continue
        nodes.append(node)

    named = {role: rename.get(nm, nm) for role, nm in graph.named.items()}
    return ModelGraph(nodes, dict(graph.params), {}, named, graph.num_classes,
                      dict(graph.meta))


def constant_fold_pass(graph: ModelGraph) -> ModelGraph:
    """Precompute nodes whose inputs are all constants."""
    params = dict(graph.params)
    nodes: list[GraphNode] = []
    for node in graph.nodes:
        if node.op.kind != "argmax" and all(nm in params for nm in node.inputs):
            attrs = dict(node.op.attrs)
            if node.op.kind == "batch_norm":
                attrs["mode"] = "infer"
            params[node.name] = ops.forward(node.op.kind, attrs,
                                            *[params[nm] for nm in node.inputs])
            continue
        nodes.append(node)
    return ModelGraph(nodes, params, {}, dict(graph.named), graph.num_classes,
                      dict(graph.meta))


def optimize_graph(graph: ModelGraph) -> ModelGraph:
    return constant_fold_pass(fuse_relu_pass(fold_batch_norm_pass(graph)))


# ---------------------------------------------------------------------------
# quantization


def quantize_model(base: FrozenModel, calibration: list[np.ndarray]) -> FrozenModel:
    """Symmetric int8 kernels, asymmetric activations from calibration ranges."""
    if not calibration:
        raise FreezeError("quantization needs at least one calibration batch")
    graph = base.graph
    lo: dict[str, float] = {}
    hi: dict[str, float] = {}

    def track(name, arr):
        lo[name] = min(lo.get(name, np.inf), float(arr.min()))
        hi[name] = max(hi.get(name, -np.inf), float(arr.max()))

    skip = {graph.named["softmax"], graph.named["argmax"]}
    for x in calibration:
        track("input", x)
        values = {"input": x}
        for node in graph.nodes:
            inputs = [values.get(nm, graph.params.get(nm)) for nm in node.inputs]
            out = ops.forward(node.op.kind, dict(node.op.attrs), *inputs)
            values[node.name] = out
            if node.op.kind != "argmax" and node.name not in skip:
                track(node.name, out)

    from .tensor import activation_qparams
    act_quant = {name: activation_qparams(lo[name], hi[name]) for name in sorted(lo)}

    params: dict[str, np.ndarray] = {}
    weight_quant = {}
    for name, arr in graph.params.items():
        if name.endswith(".w") and arr.dtype in (np.float32, np.float64):
            qp = weight_qparams(arr)
            params[name] = quantize_array(arr, qp)
            weight_quant[name] = qp
        else:
            params[name] = arr.copy()

    qgraph = ModelGraph([GraphNode(n.name, n.op, n.inputs) for n in graph.nodes],
                        params, {}, dict(graph.named), graph.num_classes,
                        dict(graph.meta))
    return FrozenModel(qgraph, "quantized", Layout.NCHW, base.input_dims,
                       base.classes, base.nodes, weight_quant, act_quant)


def dequantized_weights(model: FrozenModel) -> dict[str, np.ndarray]:
    """Float view of a quantized model's parameter table."""
    out = {}
    for name, arr in model.graph.params.items():
        if arr.dtype == np.int8:
            out[name] = dequantize_array(arr, model.weight_quant[name])
        else:
            out[name] = arr
    return out


def run_frozen(model: FrozenModel, x: np.ndarray, wanted=("logits", "softmax", "argmax"),
               quantized: bool = False, pool=None) -> dict[str, np.ndarray]:
    """Execute a frozen model on a canonical NCHW float input."""
    graph = model.graph
    if any(arr.dtype == np.int8 for arr in graph.params.values()):
        graph = ModelGraph(graph.nodes, dequantized_weights(model), {},
                           dict(graph.named), graph.num_classes, dict(graph.meta))
    fq = model.act_quant if quantized else None
    return run_inference(graph, x, wanted=wanted, fake_quant=fq, pool=pool)


# ---------------------------------------------------------------------------
# freeze: checkpoint -> deployable directory


def _calibration_inputs(data_cfg: DataConfig, count=CALIBRATION_SAMPLES):
    """Real train-split images when available, seeded noise otherwise."""
    w, h = data_cfg.inference_size
    try:
        ds = StandardDataset.open(data_cfg.dataset_location)
        ids = sorted(ds.split_ids("train"))[:count]
        if not ids:
            raise FreezeError("empty train split")
        batches = []
        for sid in ids:
            sample = ds.load_sample("train", sid)
            img = sample.image
            if img.shape[:2] != (h, w):
                from .imgio import resize_bilinear_hw3
                img = np.clip(np.rint(resize_bilinear_hw3(img, w, h)), 0, 255)
            batches.append(img.astype(np.float32).transpose(2, 0, 1)[None] / 255.0)
        return batches
    except Exception as exc:
        log.warning("calibrating on synthetic noise (%s)", exc)
        rng = np.random.Generator(np.random.PCG64(stable_seed("calibration", w, h)))
        return [rng.random((1, 3, h, w), dtype=np.float32) for _ in range(count)]


def _verify_variants(train_graph, variants, calibration):
    """Float variants must track the training graph exactly; quantized drift is
    reported but not fatal (the mask-agreement bound is a property of trained
    models, enforced by the deployment conformance tests)."""
    agreements = []
    for x in calibration[:4]:
        ref = run_inference(train_graph, x, wanted=("logits", "argmax"))
        for name in ("nchw", "nhwc", "optimized"):
            out = run_frozen(variants[name], x, wanted=("logits",))
            diff = float(np.max(np.abs(out["logits"] - ref["logits"])))
            if diff > 1e-5:
                raise FreezeError(f"variant {name} drifts from training graph "
                                  f"by {diff:.2e} (> 1e-5)")
        qout = run_frozen(variants["quantized"], x, wanted=("argmax",), quantized=True)
        agreements.append(float(np.mean(qout["argmax"] == ref["argmax"])))
    mean_agree = float(np.mean(agreements))
    if mean_agree < 0.95:
        log.warning("quantized variant agrees on %.1f%% of calibration mask "
                    "pixels; expect degraded deployment accuracy", 100 * mean_agree)
    return mean_agree


def freeze(log_dir, which: str = "best_iou", out_dir=".", verify: bool = True) -> dict:
    """Produce the four frozen containers plus nodes.yaml from a checkpoint."""
    if which not in ("best_iou", "best_acc"):
        raise FreezeError(f"'which' must be best_iou or best_acc, got {which!r}")
    ckpt = os.path.join(log_dir, which)
    if not os.path.isdir(ckpt):
        raise FreezeError(f"no {which} checkpoint under {log_dir}")
    graph, _, _ = load_checkpoint(ckpt)
    data_cfg = load_config(os.path.join(log_dir, "data.yaml"), "data")

    stripped = strip_training_ops(graph)
    optimized = optimize_graph(stripped)
    w, h = data_cfg.inference_size
    input_dims = (1, 3, h, w)
    nodes_cfg = NodesConfig(**{role: stripped.named[role]
                               for role in ("input", "code", "logits", "softmax", "argmax")})
    opt_nodes = NodesConfig(**{role: optimized.named[role]
                               for role in ("input", "code", "logits", "softmax", "argmax")})
    if opt_nodes != nodes_cfg:
        raise FreezeError("optimization must not rename the contract nodes")

    calibration = _calibration_inputs(data_cfg)
    variants = {
        "nchw": FrozenModel(stripped, "nchw", Layout.NCHW, input_dims,
                            data_cfg.classes, nodes_cfg),
        "nhwc": FrozenModel(stripped, "nhwc", Layout.NHWC, input_dims,
                            data_cfg.classes, nodes_cfg),
        "optimized": FrozenModel(optimized, "optimized", Layout.NCHW, input_dims,
                                 data_cfg.classes, nodes_cfg),
    }
    variants["quantized"] = quantize_model(variants["optimized"], calibration)

    if verify:
        infer_graph = strip_training_ops(graph)
        _verify_variants(infer_graph, variants, calibration)

    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, model in variants.items():
        path = os.path.join(out_dir, f"model_{name}.bnnf")
        write_frozen(model, path)
        paths[name] = path
    save_config(nodes_cfg, os.path.join(out_dir, "nodes.yaml"))
    shutil.copyfile(os.path.join(log_dir, "data.yaml"), os.path.join(out_dir, "data.yaml"))
    shutil.copyfile(os.path.join(log_dir, "net.yaml"), os.path.join(out_dir, "net.yaml"))
    paths["nodes"] = os.path.join(out_dir, "nodes.yaml")
    log.info("froze %s -> %s (4 variants)", ckpt, out_dir)
    return paths
