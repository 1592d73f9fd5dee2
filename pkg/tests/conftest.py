"""Shared test helpers: finite differences, tiny graphs, toy pipelines."""

import numpy as np
import pytest

from bonnet.model import GraphNode, ModelGraph
from bonnet.ops import OpSpec


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / denom)


def fd_vjp(forward, inputs, arg_index, grad_out, step=1e-5):
    """Central-difference gradient of L = sum(forward(inputs) * grad_out)."""
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    target = inputs[arg_index]
    grad = np.zeros_like(target)
    flat_t = target.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_t.size):
        orig = flat_t[i]
        flat_t[i] = orig + step
        hi = float(np.sum(forward(*inputs) * grad_out))
        flat_t[i] = orig - step
        lo = float(np.sum(forward(*inputs) * grad_out))
        flat_t[i] = orig
        flat_g[i] = (hi - lo) / (2 * step)
    return grad


def conv_chain_graph(length, channels=2, dtype=np.float64, seed=0):
    """A plain chain of 1x1 convolutions; 'logits' names the final node."""
    rng = np.random.Generator(np.random.PCG64(seed))
    nodes, params = [], {}
    prev = "input"
    for i in range(length):
        name = f"c{i}" if i < length - 1 else "logits"
        params[f"{name}.w"] = rng.normal(0, 0.8, (channels, channels, 1, 1)).astype(dtype)
        params[f"{name}.b"] = rng.normal(0, 0.1, channels).astype(dtype)
        nodes.append(GraphNode(name, OpSpec("conv2d", {"stride": 1, "padding": "same",
                                                       "dilation": 1}),
                               (prev, f"{name}.w", f"{name}.b")))
        prev = name
    named = {"input": "input", "code": prev, "logits": "logits",
             "softmax": "logits", "argmax": "logits"}
    return ModelGraph(nodes, params, {}, named, channels)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture(scope="session")
def trained_setup(tmp_path_factory):
    """One small trained-and-frozen pipeline shared by integration tests."""
    from bonnet import toydata
    from bonnet.config import AugmentSpec, NetConfig, TrainConfig
    from bonnet.dataset import import_dataset
    from bonnet.freezer import freeze
    from bonnet.trainer import fit

    root = tmp_path_factory.mktemp("pipeline")
    data_cfg = toydata.generate_toy(root / "raw", count=36, size=24, seed=99)
    dataset = import_dataset(root / "raw" / "images", root / "raw" / "labels",
                             data_cfg, seed=99)
    net_cfg = NetConfig("erfnet-mini", (1, 1), (8, 12), 0.95, 0.7)
    train_cfg = TrainConfig(learn_rate=0.004, lr_decay=0.95, batch_size=6,
                            num_workers=1, momentums=(0.9, 0.999),
                            optimizer="adam_like", weighting_policy="log_inverse",
                            focal_gamma=0.0, cache_images=2, max_epochs=10,
                            augment=AugmentSpec(flip_prob=0.5))
    log_dir = root / "log"
    tlog = fit(dataset, data_cfg, net_cfg, train_cfg, log_dir, seed=17)
    out_dir = root / "frozen"
    paths = freeze(log_dir, "best_iou", out_dir)
    return {
        "root": root, "dataset": dataset, "data_cfg": data_cfg,
        "net_cfg": net_cfg, "train_cfg": train_cfg, "log_dir": log_dir,
        "out_dir": out_dir, "paths": paths, "tlog": tlog,
    }
