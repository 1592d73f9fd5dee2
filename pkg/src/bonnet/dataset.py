"""Standard dataset format, importer, paired augmentation, and prefetching.

The on-disk layout is ``root/{train,valid,test}/{img,lbl}/<id>.png`` with
labels stored as single-channel id maps, plus a ``manifest.yaml`` recording
the split assignment, the import seed, and train-split class frequencies.
Split membership is a pure function of (seed, sample id), so re-importing the
same corpus reproduces the same manifest no matter how the directory happens
to be enumerated.
"""

from __future__ import annotations

import hashlib
import os
import queue
import threading
from dataclasses import dataclass

import numpy as np
import yaml

from . import imgio
from .config import AugmentSpec, DataConfig, format_color, save_config
from .errors import DatasetError, StreamError
from .seeding import stable_seed
from .tensor import Layout, Tensor

SPLITS = ("train", "valid", "test")


@dataclass
class Sample:
    image: np.ndarray  # (h, w, 3) uint8
    label: np.ndarray  # (h, w) uint8 class ids
    id: str

    def validate(self, num_classes: int):
        if self.image.shape[:2] != self.label.shape:
            raise DatasetError(
                f"sample '{self.id}': image {self.image.shape[:2]} and label "
                f"{self.label.shape} spatial dims differ")
        if self.label.max(initial=0) >= num_classes:
            raise DatasetError(
                f"sample '{self.id}': label value {int(self.label.max())} "
                f">= class count {num_classes}")


@dataclass
class Batch:
    images: Tensor           # (n, 3, h, w) float32 in [0, 1]
    labels: np.ndarray       # (n, h, w) int32
    ids: tuple[str, ...]


def largest_remainder_counts(fractions, total: int) -> list[int]:
    """Integer allocation hitting exact fractions; ties go to earlier entries."""
    raw = [f * total for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    leftover = total - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def _split_assignment(ids, split_fractions, seed):
    """Deterministic permutation by salted hash, then exact-count allocation."""
    def sort_key(sid):
        return hashlib.sha256(f"{seed}:{sid}".encode("utf-8")).hexdigest()

    ordered = sorted(ids, key=sort_key)
    counts = largest_remainder_counts(split_fractions, len(ordered))
    out = {}
    start = 0
    for name, count in zip(SPLITS, counts):
        out[name] = sorted(ordered[start:start + count])
        start += count
    return out


def _label_to_ids(raw, color_to_id, path):
    if raw.ndim == 2:
        bad = np.unique(raw[raw >= len(color_to_id)])
        if bad.size:
            raise DatasetError(f"label {path}: id {int(bad[0])} outside class table")
        return raw
    flat = raw.reshape(-1, 3)
    colors, inverse = np.unique(flat, axis=0, return_inverse=True)
    lut = np.zeros(len(colors), dtype=np.uint8)
    for i, color in enumerate(colors):
        key = tuple(int(v) for v in color)
        if key not in color_to_id:
            raise DatasetError(
                f"label {path}: color {format_color(key)} not present in data.yaml")
        lut[i] = color_to_id[key]
    return lut[inverse].reshape(raw.shape[:2]).astype(np.uint8)


class StandardDataset:
    """Split-organized samples under one root, as written by the importer."""

    def __init__(self, root, splits, seed, frequencies):
        self.root = str(root)
        self.splits = splits
        self.seed = seed
        self.frequencies = np.asarray(frequencies, dtype=np.float64)
        total = float(self.frequencies.sum())
        if abs(total - 1.0) > 1e-6:
            raise DatasetError(f"class frequencies sum to {total}, expected 1")
        seen = set()
        for name in SPLITS:
            overlap = seen.intersection(splits[name])
            if overlap:
                raise DatasetError(f"splits are not disjoint: {sorted(overlap)[:3]}")
            seen.update(splits[name])

    @staticmethod
    def open(root) -> "StandardDataset":
        manifest = f"{root}/manifest.yaml"
        try:
            with open(manifest, "r", encoding="utf-8") as fh:
                doc = yaml.safe_load(fh)
        except FileNotFoundError:
            raise DatasetError(f"no manifest.yaml under {root}") from None
        return StandardDataset(root, doc["splits"], doc["seed"], doc["class_frequencies"])

    def split_ids(self, split) -> list[str]:
        return list(self.splits[split])

    def load_sample(self, split, sample_id) -> Sample:
        image = imgio.load_image(f"{self.root}/{split}/img/{sample_id}.png")
        label = imgio.load_label_file(f"{self.root}/{split}/lbl/{sample_id}.png")
        return Sample(image, label, sample_id)

    def save_manifest(self):
        doc = {
            "seed": self.seed,
            "splits": {k: list(v) for k, v in self.splits.items()},
            "class_frequencies": [float(f) for f in self.frequencies],
        }
        with open(f"{self.root}/manifest.yaml", "w", encoding="utf-8") as fh:
            yaml.safe_dump(doc, fh, sort_keys=False)


def import_dataset(images_dir, labels_dir, data_config: DataConfig, seed: int) -> StandardDataset:
    """Convert an images/labels directory pair into the standard layout.

    Output goes to ``data_config.dataset_location``. Labels may be color maps
    (colors must all appear in data.yaml) or direct id maps.
    """
    image_files = sorted(f for f in os.listdir(images_dir) if f.endswith(".png"))
    if not image_files:
        raise DatasetError(f"no .png images under {images_dir}")
    ids = [os.path.splitext(f)[0] for f in image_files]
    for sid in ids:
        if not os.path.exists(f"{labels_dir}/{sid}.png"):
            raise DatasetError(f"image '{sid}.png' has no matching label in {labels_dir}")

    color_to_id = data_config.color_table()
    root = data_config.dataset_location
    assignment = _split_assignment(ids, data_config.split, seed)
    member = {sid: name for name in SPLITS for sid in assignment[name]}

    for name in SPLITS:
        os.makedirs(f"{root}/{name}/img", exist_ok=True)
        os.makedirs(f"{root}/{name}/lbl", exist_ok=True)

    counts = np.zeros(data_config.num_classes, dtype=np.int64)
    for sid in ids:
        image = imgio.load_image(f"{images_dir}/{sid}.png")
        raw = imgio.load_label_file(f"{labels_dir}/{sid}.png")
        if image.shape[:2] != raw.shape[:2]:
            raise DatasetError(
                f"sample '{sid}': image size {image.shape[:2]} does not match "
                f"label size {raw.shape[:2]}")
        label = _label_to_ids(raw, color_to_id, f"{labels_dir}/{sid}.png")
        split = member[sid]
        imgio.save_image(image, f"{root}/{split}/img/{sid}.png")
        imgio.save_image(label, f"{root}/{split}/lbl/{sid}.png")
        if split == "train":
            counts += np.bincount(label.reshape(-1), minlength=data_config.num_classes)

    if counts.sum() == 0:
        raise DatasetError("train split is empty; cannot compute class frequencies")
    frequencies = counts / counts.sum()
    ds = StandardDataset(root, assignment, seed, frequencies)
    ds.save_manifest()
    save_config(data_config, f"{root}/data.yaml")
    return ds


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    rotation_deg: float
    shear: float
    stretch: tuple[float, float]
    gamma: float

    @property
    def is_identity(self):
        return (not self.flip and self.rotation_deg == 0.0 and self.shear == 0.0
                and self.stretch == (1.0, 1.0) and self.gamma == 1.0)


def draw_augment_params(spec: AugmentSpec, rng: np.random.Generator) -> AugmentParams:
    # fixed draw order keeps results reproducible per (seed, epoch, sample)
    flip = bool(rng.random() < spec.flip_prob)
    rot = float(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
    shear = float(rng.uniform(-spec.shear, spec.shear))
    sx = float(rng.uniform(spec.stretch[0], spec.stretch[1]))
    sy = float(rng.uniform(spec.stretch[0], spec.stretch[1]))
    gamma = float(rng.uniform(spec.gamma[0], spec.gamma[1]))
    return AugmentParams(flip, rot, shear, (sx, sy), gamma)


def affine_matrix(params: AugmentParams, width: int, height: int) -> np.ndarray:
    """3x3 forward map (source pixel coords -> augmented pixel coords)."""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    theta = np.deg2rad(params.rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta), 0],
                    [np.sin(theta), np.cos(theta), 0],
                    [0, 0, 1.0]])
    shear = np.array([[1.0, params.shear, 0], [0, 1.0, 0], [0, 0, 1.0]])
    scale = np.diag([params.stretch[0], params.stretch[1], 1.0])
    flip = np.diag([-1.0 if params.flip else 1.0, 1.0, 1.0])
    to_center = np.array([[1.0, 0, -cx], [0, 1.0, -cy], [0, 0, 1.0]])
    from_center = np.array([[1.0, 0, cx], [0, 1.0, cy], [0, 0, 1.0]])
    return from_center @ rot @ shear @ scale @ flip @ to_center


def _warp(channel_stack, minv, out_h, out_w, bilinear, fill):
    """Inverse-map resampling; sources outside the image read as ``fill``."""
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    ones = np.ones_like(xs, dtype=np.float64)
    src = minv @ np.stack([xs.astype(np.float64), ys.astype(np.float64), ones], axis=0).reshape(3, -1)
    sx = src[0].reshape(out_h, out_w)
    sy = src[1].reshape(out_h, out_w)
    h, w = channel_stack.shape[-2:]
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    if bilinear:
        x0 = np.clip(np.floor(sx), 0, w - 1).astype(np.int64)
        y0 = np.clip(np.floor(sy), 0, h - 1).astype(np.int64)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        tx = np.clip(sx - x0, 0.0, 1.0)
        ty = np.clip(sy - y0, 0.0, 1.0)
        out = (channel_stack[..., y0, x0] * (1 - tx) * (1 - ty)
               + channel_stack[..., y0, x1] * tx * (1 - ty)
               + channel_stack[..., y1, x0] * (1 - tx) * ty
               + channel_stack[..., y1, x1] * tx * ty)
    else:
        xn = np.clip(np.rint(sx), 0, w - 1).astype(np.int64)
        yn = np.clip(np.rint(sy), 0, h - 1).astype(np.int64)
        out = channel_stack[..., yn, xn]
    return np.where(inside, out, fill)


def apply_gamma(image_u8: np.ndarray, gamma: float) -> np.ndarray:
    if gamma == 1.0:
        return image_u8.copy()
    x = image_u8.astype(np.float64) / 255.0
    return np.clip(np.rint(255.0 * np.power(x, gamma)), 0, 255).astype(np.uint8)


def augment(sample: Sample, spec: AugmentSpec, rng: np.random.Generator) -> Sample:
    """Identical geometric transform on image (bilinear) and label (nearest)."""
    params = draw_augment_params(spec, rng)
    return apply_augment(sample, params)


def apply_augment(sample: Sample, params: AugmentParams) -> Sample:
    if params.is_identity:
        return Sample(sample.image.copy(), sample.label.copy(), sample.id)
    h, w = sample.label.shape
    image, label = sample.image, sample.label
    if not (params.flip is False and params.rotation_deg == 0.0 and params.shear == 0.0
            and params.stretch == (1.0, 1.0)):
        minv = np.linalg.inv(affine_matrix(params, w, h))
        planes = image.astype(np.float64).transpose(2, 0, 1)
        warped = _warp(planes, minv, h, w, bilinear=True, fill=0.0)
        image = np.clip(np.rint(warped), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        label = _warp(label, minv, h, w, bilinear=False, fill=0).astype(np.uint8)
    image = apply_gamma(image, params.gamma)
    return Sample(image, label, sample.id)


# ---------------------------------------------------------------------------
# bounded prefetch


class BufferMeter:
    """Records the high-water mark of batches held in the prefetch buffer."""

    def __init__(self):
        self._lock = threading.Lock()
        self.peak = 0

    def observe(self, depth: int):
        with self._lock:
            self.peak = max(self.peak, depth)


class _ProducerFailure:
    def __init__(self, exc):
        self.exc = exc


_EPOCH_DONE = object()


def epoch_order(ids, seed: int, epoch: int) -> list[str]:
    rng = np.random.Generator(np.random.PCG64(stable_seed("epoch-order", seed, epoch)))
    order = list(ids)
    rng.shuffle(order)
    return order


def _assemble(samples) -> Batch:
    images = np.stack([s.image for s in samples]).astype(np.float32) / 255.0
    labels = np.stack([s.label for s in samples]).astype(np.int32)
    return Batch(Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2)), Layout.NCHW),
                 labels, tuple(s.id for s in samples))


def prefetch_epoch(dataset: StandardDataset, split: str, batch_size: int,
                   cache_capacity: int, spec: AugmentSpec | None, seed: int,
                   epoch: int = 0, meter: BufferMeter | None = None):
    """One shuffled epoch of augmented batches from a producer thread.

    At most ``cache_capacity`` batches sit in RAM at a time. Each split sample
    appears exactly once per epoch (the final batch may be short). Closing the
    returned generator shuts the producer down and joins it.
    """
    if cache_capacity < 1:
        raise DatasetError(f"cache_capacity must be >= 1, got {cache_capacity}")
    if batch_size < 1:
        raise DatasetError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(dataset.split_ids(split), seed, epoch)
    buffer: queue.Queue = queue.Queue(maxsize=cache_capacity)
    stop = threading.Event()

    def produce():
        try:
            for start in range(0, len(order), batch_size):
                chunk = order[start:start + batch_size]
                samples = []
                for sid in chunk:
                    sample = dataset.load_sample(split, sid)
                    if spec is not None and not spec.is_identity:
                        rng = np.random.Generator(np.random.PCG64(
                            stable_seed("augment", seed, epoch, sid)))
                        sample = augment(sample, spec, rng)
                    samples.append(sample)
                batch = _assemble(samples)
                while not stop.is_set():
                    try:
                        buffer.put(batch, timeout=0.05)
                        if meter is not None:
                            meter.observe(buffer.qsize())
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            _put_final(_EPOCH_DONE)
        except Exception as exc:  # surfaced on the consumer side
            _put_final(_ProducerFailure(exc))

    def _put_final(item):
        while not stop.is_set():
            try:
                buffer.put(item, timeout=0.05)
                return
            except queue.Full:
                continue

    producer = threading.Thread(target=produce, name=f"prefetch-{split}", daemon=True)
    producer.start()

    def generate():
        try:
            while True:
                item = buffer.get()
                if item is _EPOCH_DONE:
                    return
                if isinstance(item, _ProducerFailure):
                    raise StreamError(f"prefetch producer failed: {item.exc}") from item.exc
                yield item
        finally:
            stop.set()
            while True:  # drain so a blocked producer can observe the stop flag
                try:
                    buffer.get_nowait()
                except queue.Empty:
                    break
            producer.join(timeout=5.0)

    return generate()
