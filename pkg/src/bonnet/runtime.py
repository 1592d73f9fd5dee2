"""Deployment sessions: load a frozen model, pick a backend, get masks.

A ``Session`` is immutable after open and safe for concurrent use; every
``infer`` call owns its scratch. Images of any size come in, a label mask at
the original resolution comes out, with per-stage timing in milliseconds.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import imgio
from .container import FrozenModel, read_frozen
from .config import load_config
from .errors import IncompatibleBackendError, ShapeError
from .freezer import dequantized_weights
from .model import ModelGraph, run_inference
from .tensor import Layout, Tensor, convert_layout, from_nchw

BACKENDS = ("reference_float", "quantized_int8")
DEVICES = ("cpu_single", "cpu_parallel")

PARALLEL_WORKERS = 4


@dataclass
class Mask:
    labels: np.ndarray                 # (h, w) class ids at source resolution
    probabilities: np.ndarray | None   # (h, w, c) optional
    timing: dict[str, float]           # preprocess / inference / postprocess, ms


class Session:
    """One frozen model bound to a backend and an execution device."""

    def __init__(self, model: FrozenModel, backend: str, device: str):
        if backend not in BACKENDS:
            raise IncompatibleBackendError(f"unknown backend {backend!r}")
        if device not in DEVICES:
            raise IncompatibleBackendError(f"unknown device {device!r}")
        if backend == "quantized_int8" and model.variant != "quantized":
            raise IncompatibleBackendError(
                f"backend quantized_int8 requires the quantized variant, "
                f"got variant {model.variant!r}")
        if backend == "reference_float" and model.variant == "quantized":
            raise IncompatibleBackendError(
                "backend reference_float cannot run the quantized variant")
        self.model = model
        self.backend = backend
        self.device = device
        self.pool = (ThreadPoolExecutor(max_workers=PARALLEL_WORKERS)
                     if device == "cpu_parallel" else None)
        graph = model.graph
        if any(arr.dtype == np.int8 for arr in graph.params.values()):
            graph = ModelGraph(graph.nodes, dequantized_weights(model), {},
                               dict(graph.named), graph.num_classes, dict(graph.meta))
        graph.named = {
            "input": model.nodes.input, "code": model.nodes.code,
            "logits": model.nodes.logits, "softmax": model.nodes.softmax,
            "argmax": model.nodes.argmax,
        }
        self._graph = graph

    @property
    def classes(self):
        return self.model.classes

    @property
    def class_colors(self):
        table = sorted(self.model.classes, key=lambda c: c.id)
        return [c.color for c in table]

    def close(self):
        if self.pool is not None:
            self.pool.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_session(model_dir, variant: str, backend: str = "reference_float",
                 device: str = "cpu_single") -> Session:
    """Load ``model_<variant>.bnnf`` plus nodes.yaml and bind a backend."""
    path = os.path.join(model_dir, f"model_{variant}.bnnf")
    if not os.path.exists(path):
        raise IncompatibleBackendError(
            f"model directory {model_dir} has no variant {variant!r}")
    model = read_frozen(path)  # checksum verified on read
    model.nodes = load_config(os.path.join(model_dir, "nodes.yaml"), "nodes")
    return Session(model, backend, device)


def infer(session: Session, image: np.ndarray, want_probabilities: bool = False) -> Mask:
    """Segment one (h, w, 3) uint8 image; mask returns at source resolution."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (h, w, 3) image, got {image.shape}")
    src_h, src_w = image.shape[:2]
    if src_h == 0 or src_w == 0:
        raise ShapeError("zero-sized image")
    _, _, net_h, net_w = session.model.input_dims
    scale, offset = session.model.input_norm

    t0 = time.perf_counter()
    if (src_h, src_w) != (net_h, net_w):
        resized = imgio.resize_bilinear_hw3(image, net_w, net_h)
    else:
        resized = image.astype(np.float32)
    x = resized.transpose(2, 0, 1)[None] * np.float32(scale) + np.float32(offset)
    tensor = from_nchw(np.ascontiguousarray(x), session.model.layout)
    t1 = time.perf_counter()

    fake_quant = session.model.act_quant if session.backend == "quantized_int8" else None
    wanted = ("argmax", "softmax") if want_probabilities else ("argmax",)
    out = run_inference(session._graph, tensor.nchw(), wanted=wanted,
                        fake_quant=fake_quant, pool=session.pool)
    t2 = time.perf_counter()

    labels = out["argmax"][0].astype(np.uint8)
    if (src_h, src_w) != (net_h, net_w):
        labels = imgio.resize_nearest_2d(labels, src_w, src_h)
    probs = None
    if want_probabilities:
        p = out["softmax"][0]  # (c, net_h, net_w)
        if (src_h, src_w) != (net_h, net_w):
            p = np.stack([imgio.resize_nearest_2d(p[c], src_w, src_h)
                          for c in range(p.shape[0])])
        probs = p.transpose(1, 2, 0)
    t3 = time.perf_counter()

    timing = {"preprocess": (t1 - t0) * 1e3,
              "inference": (t2 - t1) * 1e3,
              "postprocess": (t3 - t2) * 1e3}
    return Mask(labels, probs, timing)


def colorize(mask: np.ndarray, class_colors, image: np.ndarray | None = None,
             alpha: float = 0.5) -> np.ndarray:
    """Pure color map of a mask, or an alpha blend over the source image."""
    return imgio.colorize(mask, class_colors, image, alpha)


# keep the layout helpers discoverable from the deployment-facing module
__all__ = ["Session", "Mask", "open_session", "infer", "colorize",
           "BACKENDS", "DEVICES", "Layout", "Tensor", "convert_layout"]
