"""Reverse-mode automatic differentiation over a recorded tape.

The tape records each op application (kind, attrs, input ids, output id) and
owns the activation values. Two retention modes exist:

* full retention: every activation is kept, ``backward`` walks the tape once;
* checkpointed: only every ``segment_size``-th node's output survives the
  forward pass, and ``checkpointed_backward`` recomputes each segment from its
  left checkpoint before backpropagating through it.

Both modes visit nodes and accumulate gradients in the identical order, and
all kernels are pure, so the two paths agree bit-for-bit at float64 for a
fixed dropout seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError


class RetentionMeter:
    """High-water mark of simultaneously live activation values."""

    def __init__(self):
        self.live = 0
        self.peak = 0

    def inc(self, k=1):
        self.live += k
        self.peak = max(self.peak, self.live)

    def dec(self, k=1):
        self.live -= k


@dataclass
class TapeNode:
    kind: str
    attrs: dict
    input_ids: tuple[int, ...]
    out_id: int


class Tape:
    """Single-owner record of one forward pass.

    ``segment_size=None`` retains every activation. With a segment size, only
    checkpoint node outputs (every ``segment_size``-th node) are retained;
    the executor releases dead intermediates via :meth:`release`.
    """

    def __init__(self, segment_size: int | None = None):
        if segment_size is not None and segment_size < 1:
            raise ConfigError(f"segment_size must be >= 1, got {segment_size}")
        self.segment_size = segment_size
        self.nodes: list[TapeNode] = []
        self.values: dict[int, np.ndarray] = {}
        self.parameters: set[int] = set()
        self.checkpoints: list[int] = []  # node indices
        self.meter = RetentionMeter()
        self._leaf_ids: set[int] = set()
        self._producer: dict[int, int] = {}  # out_id -> node index
        self._next_id = 0

    # -- construction -------------------------------------------------------

    def leaf(self, value: np.ndarray, trainable: bool = False) -> int:
        tid = self._next_id
        self._next_id += 1
        self.values[tid] = np.asarray(value)
        self._leaf_ids.add(tid)
        if trainable:
            self.parameters.add(tid)
        return tid

    def record(self, kind: str, attrs: dict, input_ids: tuple[int, ...]) -> int:
        inputs = [self.value(i) for i in input_ids]
        out = ops.forward(kind, attrs, *inputs)
        idx = len(self.nodes)
        out_id = self._next_id
        self._next_id += 1
        self.nodes.append(TapeNode(kind, attrs, tuple(input_ids), out_id))
        self._producer[out_id] = idx
        self.values[out_id] = out
        self.meter.inc()
        if self.segment_size is not None and idx % self.segment_size == self.segment_size - 1:
            self.checkpoints.append(idx)
        return out_id

    def release(self, tid: int):
        """Drop an intermediate value when checkpointing; no-op otherwise."""
        if self.segment_size is None or tid in self._leaf_ids:
            return
        if self._producer.get(tid) in self._ckpt_set():
            return
        if tid in self.values:
            del self.values[tid]
            self.meter.dec()

    def value(self, tid: int) -> np.ndarray:
        return self.values[tid]

    def _ckpt_set(self):
        return set(self.checkpoints)


def _check_scalar_loss(tape: Tape, loss_id: int):
    node = tape.nodes[tape._producer[loss_id]] if loss_id in tape._producer else None
    if node is None:
        raise ShapeError("loss must be the output of a recorded op")
    # the loss value may already be released under checkpointing; recompute shape lazily
    val = tape.values.get(loss_id)
    if val is not None and val.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {val.shape}")


def _accumulate(grads: dict, tid: int, g: np.ndarray):
    if tid in grads:
        grads[tid] = grads[tid] + g
    else:
        grads[tid] = g


def backward(tape: Tape, loss_id: int) -> dict[int, np.ndarray]:
    """Exact reverse-mode gradients for every trainable parameter."""
    _check_scalar_loss(tape, loss_id)
    loss_val = tape.value(loss_id)
    grads: dict[int, np.ndarray] = {loss_id: np.ones_like(loss_val)}
    for node in reversed(tape.nodes):
        gout = grads.pop(node.out_id, None)
        if gout is None:
            continue
        inputs = [tape.value(i) for i in node.input_ids]
        gins = ops.backward(node.kind, node.attrs, inputs, tape.value(node.out_id), gout)
        for tid, g in zip(node.input_ids, gins):
            if g is not None:
                _accumulate(grads, tid, g)
    return {p: grads.get(p, np.zeros_like(tape.value(p))) for p in sorted(tape.parameters)}


def checkpointed_backward(tape: Tape, loss_id: int,
                          segment_size: int) -> dict[int, np.ndarray]:
    """Gradients via segment recomputation; equals :func:`backward` bit-for-bit."""
    if segment_size < 1:
        raise ConfigError(f"segment_size must be >= 1, got {segment_size}")
    n = len(tape.nodes)
    if n == 0:
        raise ShapeError("empty tape")
    ckpts = set(tape.checkpoints)
    # segment boundaries: (start, end] ranges ending at each checkpoint, plus a tail
    bounds = sorted(tape.checkpoints)
    if not bounds or bounds[-1] != n - 1:
        bounds = bounds + [n - 1]
    segments = []
    start = 0
    for b in bounds:
        segments.append((start, b + 1))
        start = b + 1

    scratch: dict[int, np.ndarray] = {}  # recomputed activations, metered

    def fetch(tid: int) -> np.ndarray:
        if tid in tape.values:
            return tape.values[tid]
        if tid in scratch:
            return scratch[tid]
        # cross-segment reference: rebuild the producing segment
        pidx = tape._producer[tid]
        for s, e in segments:
            if s <= pidx < e:
                _materialize(s, e)
                return scratch[tid]
        raise ShapeError(f"no producer for tensor id {tid}")

    def _materialize(s: int, e: int):
        for idx in range(s, e):
            node = tape.nodes[idx]
            if node.out_id in tape.values or node.out_id in scratch:
                continue
            inputs = [fetch(i) for i in node.input_ids]
            scratch[node.out_id] = ops.forward(node.kind, node.attrs, *inputs)
            tape.meter.inc()

    def _drop_scratch():
        tape.meter.dec(len(scratch))
        scratch.clear()

    grads: dict[int, np.ndarray] = {}
    for s, e in reversed(segments):
        _materialize(s, e)
        for idx in range(e - 1, s - 1, -1):
            node = tape.nodes[idx]
            if node.out_id == loss_id and loss_id not in grads:
                out_val = fetch(loss_id)
                if out_val.size != 1:
                    raise ShapeError(f"loss must be scalar, got shape {out_val.shape}")
                grads[loss_id] = np.ones_like(out_val)
            gout = grads.pop(node.out_id, None)
            if gout is None:
                continue
            inputs = [fetch(i) for i in node.input_ids]
            gins = ops.backward(node.kind, node.attrs, inputs, fetch(node.out_id), gout)
            for tid, g in zip(node.input_ids, gins):
                if g is not None:
                    _accumulate(grads, tid, g)
        _drop_scratch()
        # the segment's right checkpoint has served its purpose
        ck_idx = e - 1
        if ck_idx in ckpts:
            out_id = tape.nodes[ck_idx].out_id
            if out_id in tape.values and out_id not in tape._leaf_ids:
                del tape.values[out_id]
                tape.meter.dec()
    return {p: grads.get(p, np.zeros_like(tape.value(p))) for p in sorted(tape.parameters)}
