"""Optimization loop with synchronous multi-worker gradient averaging.

Workers are concurrent execution lanes over shards of each batch. All of them
read the same parameter snapshot, their gradients are averaged elementwise,
and a single coordinator applies the update, so every worker observes the
identical parameters on the next step. Per-epoch validation tracks the best
mean-IoU and best mean-accuracy models as reloadable checkpoint directories.
"""

from __future__ import annotations

import csv
import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import imgio
from .autodiff import Tape, backward, checkpointed_backward
from .config import (DataConfig, NetConfig, TrainConfig, save_config)
from .dataset import StandardDataset, prefetch_epoch
from .errors import CorruptFileError, ShapeError, TrainingError
from .metrics import ConfusionMatrix, class_weights, metrics
from .model import (GraphNode, LossSpec, ModelGraph, build_architecture,
                    run_inference, run_training)
from .ops import OpSpec

log = logging.getLogger("bonnet.trainer")

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# optimizers


class SgdMomentum:
    """Classical momentum: v <- m*v + g; p <- p - lr*v."""

    kind = "sgd_momentum"

    def __init__(self, momentum: float, lr: float):
        self.momentum = momentum
        self.lr = lr
        self.velocity: dict[str, np.ndarray] = {}

    def apply(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        for name in sorted(params):
            g = grads[name]
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] = params[name] - np.asarray(self.lr, dtype=params[name].dtype) * v

    def state_arrays(self):
        return {f"v/{k}": v for k, v in self.velocity.items()}

    def load_state_arrays(self, arrays):
        self.velocity = {k[2:]: v for k, v in arrays.items() if k.startswith("v/")}

    def state_meta(self):
        return {"kind": self.kind, "momentum": self.momentum, "lr": self.lr}


class AdamLike:
    """Two-momentum adaptive rule with bias correction."""

    kind = "adam_like"

    def __init__(self, beta1: float, beta2: float, lr: float, eps: float = 1e-8):
        self.beta1, self.beta2, self.lr, self.eps = beta1, beta2, lr, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def apply(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name in sorted(params):
            g = grads[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            step = self.lr * mhat / (np.sqrt(vhat) + self.eps)
            params[name] = params[name] - step.astype(params[name].dtype)

    def state_arrays(self):
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays):
        self.m = {k[2:]: v for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: v for k, v in arrays.items() if k.startswith("v/")}

    def state_meta(self):
        return {"kind": self.kind, "beta1": self.beta1, "beta2": self.beta2,
                "lr": self.lr, "eps": self.eps, "t": self.t}


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam_like":
        return AdamLike(cfg.momentums[0], cfg.momentums[1], cfg.learn_rate)
    return SgdMomentum(cfg.momentums[0], cfg.learn_rate)


# ---------------------------------------------------------------------------
# gradient averaging and the synchronous step


def average_gradients(gradient_sets: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Elementwise arithmetic mean over K shape-compatible gradient sets."""
    if not gradient_sets:
        raise ShapeError("need at least one gradient set")
    first = gradient_sets[0]
    for gs in gradient_sets[1:]:
        if set(gs) != set(first):
            missing = sorted(set(first).symmetric_difference(gs))
            raise ShapeError(f"gradient sets disagree on parameter '{missing[0]}'")
        for name in first:
            if gs[name].shape != first[name].shape:
                raise ShapeError(
                    f"shape mismatch for parameter '{name}': "
                    f"{first[name].shape} vs {gs[name].shape}")
    k = len(gradient_sets)
    out = {}
    for name in sorted(first):
        total = gradient_sets[0][name].copy()
        for gs in gradient_sets[1:]:
            total = total + gs[name]
        out[name] = total / k
    return out


def _shard_slices(n: int, k: int):
    """K contiguous shards; the last one wraps around when n % k != 0."""
    size = -(-n // k)
    shards = []
    for i in range(k):
        idx = np.arange(i * size, (i + 1) * size) % n
        shards.append(idx)
    return shards


def _worker_pass(graph, xs, ys, loss_spec: LossSpec, segment, seed_base):
    tape = Tape(segment_size=segment)
    ids, bn_stats = run_training(graph, xs, tape, seed_base)
    labels_id = tape.leaf(ys)
    attrs = {"gamma": loss_spec.focal_gamma,
             "class_weights": np.asarray(loss_spec.class_weights, dtype=xs.dtype)}
    loss_id = tape.record("focal_loss", attrs, (ids[graph.named["logits"]], labels_id))
    loss_val = float(tape.value(loss_id))
    if segment is None:
        grads = backward(tape, loss_id)
    else:
        grads = checkpointed_backward(tape, loss_id, segment)
    named = {name: grads[tid] for name, tid in ids.items() if tid in grads}
    return named, bn_stats, loss_val


def train_step(graph: ModelGraph, images: np.ndarray, labels: np.ndarray,
               num_workers: int, optimizer, loss_spec: LossSpec,
               segment: int | None, run_seed, step: int,
               pool: ThreadPoolExecutor | None = None) -> float:
    """One synchronous data-parallel update; aborts atomically on failure."""
    shards = _shard_slices(images.shape[0], num_workers)

    def run_worker(worker):
        idx = shards[worker]
        return _worker_pass(graph, images[idx], labels[idx], loss_spec, segment,
                            (run_seed, step, worker))

    if num_workers == 1 or pool is None:
        results = [run_worker(w) for w in range(num_workers)]
    else:
        futures = [pool.submit(run_worker, w) for w in range(num_workers)]
        try:
            results = [f.result() for f in futures]
        except Exception as exc:
            for f in futures:
                f.cancel()
            raise TrainingError(f"worker failed at step {step}: {exc}") from exc

    grad_sets = [named for named, _, _ in results]
    averaged = average_gradients(grad_sets)
    optimizer.apply(graph.params, averaged)

    # running-statistics update from the averaged per-worker batch stats
    decay_nodes = {}
    for _, bn_stats, _ in results:
        for node_name, (mu, var) in bn_stats.items():
            decay_nodes.setdefault(node_name, []).append((mu, var))
    for node_name, stats in decay_nodes.items():
        node = graph.node_by_name(node_name)
        decay = node.op.attrs["decay"]
        mu = np.mean([s[0] for s in stats], axis=0)
        var = np.mean([s[1] for s in stats], axis=0)
        rm = graph.state[f"{node_name}.running_mean"]
        rv = graph.state[f"{node_name}.running_var"]
        graph.state[f"{node_name}.running_mean"] = (decay * rm + (1 - decay) * mu).astype(rm.dtype)
        graph.state[f"{node_name}.running_var"] = (decay * rv + (1 - decay) * var).astype(rv.dtype)

    return float(np.mean([lv for _, _, lv in results]))


# ---------------------------------------------------------------------------
# checkpoints


def _crc_file(path) -> int:
    with open(path, "rb") as fh:
        return zlib.crc32(fh.read()) & 0xFFFFFFFF


def _graph_doc(graph: ModelGraph) -> dict:
    return {
        "nodes": [{"name": n.name, "kind": n.op.kind,
                   "attrs": dict(n.op.attrs), "inputs": list(n.inputs)}
                  for n in graph.nodes],
        "named": dict(graph.named),
        "num_classes": graph.num_classes,
        "meta": dict(graph.meta),
    }


def _graph_from_doc(doc) -> ModelGraph:
    nodes = [GraphNode(n["name"], OpSpec(n["kind"], dict(n["attrs"])), tuple(n["inputs"]))
             for n in doc["nodes"]]
    return ModelGraph(nodes, {}, {}, dict(doc["named"]), doc["num_classes"],
                      dict(doc.get("meta", {})))


def save_checkpoint(graph: ModelGraph, optimizer, path, extra=None):
    """Checkpoint directory: graph.yaml + npz arrays + checksummed meta."""
    os.makedirs(path, exist_ok=True)
    with open(f"{path}/graph.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(_graph_doc(graph), fh, sort_keys=False)
    np.savez(f"{path}/params.npz", **graph.params)
    np.savez(f"{path}/state.npz", **graph.state)
    opt_meta = optimizer.state_meta() if optimizer is not None else None
    if optimizer is not None:
        np.savez(f"{path}/optim.npz", **optimizer.state_arrays())
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "optimizer": opt_meta,
        "extra": extra or {},
        "crc32": {name: _crc_file(f"{path}/{name}")
                  for name in ("params.npz", "state.npz")
                  + (("optim.npz",) if optimizer is not None else ())},
    }
    with open(f"{path}/meta.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(meta, fh, sort_keys=False)


def load_checkpoint(path):
    """Restore (graph, optimizer, extra); bit-exact parameter round trip."""
    try:
        with open(f"{path}/meta.yaml", "r", encoding="utf-8") as fh:
            meta = yaml.safe_load(fh)
    except FileNotFoundError:
        raise CorruptFileError(f"no checkpoint at {path}") from None
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CorruptFileError(
            f"checkpoint version mismatch: found {meta.get('format_version')}, "
            f"expected {CHECKPOINT_VERSION}")
    for name, want in meta["crc32"].items():
        have = _crc_file(f"{path}/{name}")
        if have != want:
            raise CorruptFileError(f"checksum mismatch in {name}: "
                                   f"{have:#010x} != {want:#010x}")
    with open(f"{path}/graph.yaml", "r", encoding="utf-8") as fh:
        graph = _graph_from_doc(yaml.safe_load(fh))
    with np.load(f"{path}/params.npz") as z:
        graph.params = {k: z[k] for k in z.files}
    with np.load(f"{path}/state.npz") as z:
        graph.state = {k: z[k] for k in z.files}
    optimizer = None
    opt_meta = meta.get("optimizer")
    if opt_meta:
        if opt_meta["kind"] == "adam_like":
            optimizer = AdamLike(opt_meta["beta1"], opt_meta["beta2"], opt_meta["lr"],
                                 opt_meta["eps"])
            optimizer.t = opt_meta["t"]
        else:
            optimizer = SgdMomentum(opt_meta["momentum"], opt_meta["lr"])
        with np.load(f"{path}/optim.npz") as z:
            optimizer.load_state_arrays({k: z[k] for k in z.files})
    return graph, optimizer, meta.get("extra", {})


# ---------------------------------------------------------------------------
# fit


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)        # (step, loss, lr)
    validations: list = field(default_factory=list)  # (epoch, step, miou, macc)
    checkpoints: dict = field(default_factory=dict)  # name -> path
    debug_images: list = field(default_factory=list)
    best_miou: float = float("-inf")
    best_macc: float = float("-inf")


def evaluate(graph: ModelGraph, dataset: StandardDataset, split: str,
             batch_size: int = 8) -> tuple:
    """Confusion-matrix metrics of the graph over one split (infer mode)."""
    cm = ConfusionMatrix(graph.num_classes)
    stream = prefetch_epoch(dataset, split, batch_size, 2, None, seed=0, epoch=0)
    for batch in stream:
        out = run_inference(graph, batch.images.data, wanted=("argmax",))
        cm.update(out["argmax"], batch.labels)
    return metrics(cm), cm


def _write_scalars(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr", "miou", "macc"])
        writer.writerows(rows)


def _check_downsampling(dataset, data_cfg, net_cfg):
    factor = 2 ** len(net_cfg.layers_per_stage)
    w, h = data_cfg.inference_size
    if w % factor or h % factor:
        raise TrainingError(
            f"inference_size {data_cfg.inference_size} must be divisible by the "
            f"total downsampling factor {factor}")


def fit(dataset: StandardDataset, data_cfg: DataConfig, net_cfg: NetConfig,
        train_cfg: TrainConfig, log_dir, seed: int = 0) -> TrainLog:
    """Train for ``max_epochs``, validating and checkpointing every epoch."""
    _check_downsampling(dataset, data_cfg, net_cfg)
    os.makedirs(log_dir, exist_ok=True)
    for name, cfg in (("data", data_cfg), ("net", net_cfg), ("train", train_cfg)):
        save_config(cfg, f"{log_dir}/{name}.yaml")

    graph = build_architecture(net_cfg, data_cfg.num_classes, init_seed=seed)
    weights = class_weights(dataset.frequencies, train_cfg.weighting_policy)
    loss_spec = LossSpec(tuple(float(w) for w in weights), train_cfg.focal_gamma)
    optimizer = make_optimizer(train_cfg)
    tlog = TrainLog()
    rows = []
    step = 0
    pool = (ThreadPoolExecutor(max_workers=train_cfg.num_workers)
            if train_cfg.num_workers > 1 else None)
    debug_ids = sorted(dataset.split_ids("valid"))[:4]

    try:
        for epoch in range(train_cfg.max_epochs):
            optimizer.lr = train_cfg.learn_rate * train_cfg.lr_decay ** epoch
            stream = prefetch_epoch(dataset, "train", train_cfg.batch_size,
                                    train_cfg.cache_images, train_cfg.augment,
                                    seed, epoch)
            for batch in stream:
                loss_val = train_step(
                    graph, batch.images.data, batch.labels, train_cfg.num_workers,
                    optimizer, loss_spec, train_cfg.checkpoint_gradients,
                    seed, step, pool)
                if not np.isfinite(loss_val):
                    raise TrainingError(
                        f"non-finite loss {loss_val} at step {step} (epoch {epoch})")
                tlog.steps.append((step, loss_val, optimizer.lr))
                rows.append([step, repr(float(loss_val)), repr(float(optimizer.lr)), "", ""])
                step += 1

            m, _ = evaluate(graph, dataset, "valid", train_cfg.batch_size)
            tlog.validations.append((epoch, step, m.miou, m.macc))
            rows.append([step, "", repr(float(optimizer.lr)),
                         repr(float(m.miou)), repr(float(m.macc))])
            log.info("epoch %d: mIoU %.4f mAcc %.4f", epoch, m.miou, m.macc)

            if m.miou > tlog.best_miou:
                tlog.best_miou = m.miou
                path = f"{log_dir}/best_iou"
                save_checkpoint(graph, optimizer, path,
                                extra={"epoch": epoch, "miou": float(m.miou),
                                       "macc": float(m.macc)})
                tlog.checkpoints["best_iou"] = path
            if m.macc > tlog.best_macc:
                tlog.best_macc = m.macc
                path = f"{log_dir}/best_acc"
                save_checkpoint(graph, optimizer, path,
                                extra={"epoch": epoch, "miou": float(m.miou),
                                       "macc": float(m.macc)})
                tlog.checkpoints["best_acc"] = path

            if train_cfg.save_debug_images:
                os.makedirs(f"{log_dir}/debug", exist_ok=True)
                palette = [c.color for c in data_cfg.classes]
                for sid in debug_ids:
                    sample = dataset.load_sample("valid", sid)
                    x = sample.image.astype(np.float32).transpose(2, 0, 1)[None] / 255.0
                    out = run_inference(graph, x, wanted=("argmax",))
                    overlay = imgio.colorize(out["argmax"][0], palette, sample.image, 0.5)
                    path = f"{log_dir}/debug/epoch{epoch:03d}_{sid}.png"
                    imgio.save_image(overlay, path)
                    tlog.debug_images.append(path)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
        _write_scalars(f"{log_dir}/scalars.csv", rows)
    return tlog
