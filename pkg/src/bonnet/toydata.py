"""Synthetic shapes corpus: circles, rectangles, and triangles on texture.

Four classes (background + one per shape kind) with pixel-exact labels. The
generator is a pure function of its seed, so a corpus can be regenerated
byte-for-byte anywhere. Intended as the desk-scale stand-in for a real
segmentation dataset.
"""

from __future__ import annotations

import os

import numpy as np

from . import imgio
from .config import ClassDef, DataConfig, save_config
from .seeding import stable_seed

CLASSES = (
    ClassDef(0, "background", (0, 0, 0)),
    ClassDef(1, "circle", (224, 58, 58)),
    ClassDef(2, "rectangle", (58, 224, 86)),
    ClassDef(3, "triangle", (58, 102, 224)),
)

_BASE_COLOR = {1: (190, 60, 60), 2: (60, 190, 80), 3: (60, 90, 190)}


def _textured_background(size, rng):
    base = rng.uniform(100, 160)
    coarse = rng.uniform(-25, 25, size=(8, 8, 1)).repeat(3, axis=2)
    blur = imgio.resize_bilinear_hw3(coarse + base, size, size)
    noise = rng.normal(0, 6, size=(size, size, 3))
    return np.clip(blur + noise, 0, 255)


def _circle_mask(size, rng):
    r = rng.uniform(0.12 * size, 0.22 * size)
    cx = rng.uniform(r, size - r)
    cy = rng.uniform(r, size - r)
    ys, xs = np.mgrid[0:size, 0:size]
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


def _rect_mask(size, rng):
    w = rng.uniform(0.20 * size, 0.38 * size)
    h = rng.uniform(0.20 * size, 0.38 * size)
    x0 = rng.uniform(0, size - w)
    y0 = rng.uniform(0, size - h)
    ys, xs = np.mgrid[0:size, 0:size]
    return (xs >= x0) & (xs < x0 + w) & (ys >= y0) & (ys < y0 + h)


def _triangle_mask(size, rng):
    for _ in range(20):
        cx = rng.uniform(0.25 * size, 0.75 * size)
        cy = rng.uniform(0.25 * size, 0.75 * size)
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=3))
        radii = rng.uniform(0.15 * size, 0.28 * size, size=3)
        px = cx + radii * np.cos(angles)
        py = cy + radii * np.sin(angles)
        area = 0.5 * abs((px[1] - px[0]) * (py[2] - py[0]) - (px[2] - px[0]) * (py[1] - py[0]))
        if area >= 0.01 * size * size:
            break
    ys, xs = np.mgrid[0:size, 0:size]
    inside = np.ones((size, size), dtype=bool)
    for i in range(3):
        x1, y1 = px[i], py[i]
        x2, y2 = px[(i + 1) % 3], py[(i + 1) % 3]
        cross = (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1)
        inside &= cross >= 0
    return inside


_SHAPES = {1: _circle_mask, 2: _rect_mask, 3: _triangle_mask}


def generate_sample(size, rng):
    image = _textured_background(size, rng)
    label = np.zeros((size, size), dtype=np.uint8)
    for _ in range(int(rng.integers(1, 4))):
        cls = int(rng.integers(1, 4))
        mask = _SHAPES[cls](size, rng)
        jitter = rng.uniform(-30, 30, size=3)
        color = np.clip(np.asarray(_BASE_COLOR[cls], dtype=np.float64) + jitter, 0, 255)
        noise = rng.normal(0, 8, size=(size, size, 3))
        shaded = np.clip(color.reshape(1, 1, 3) + noise, 0, 255)
        image = np.where(mask[:, :, None], shaded, image)
        label[mask] = cls
    return np.clip(np.rint(image), 0, 255).astype(np.uint8), label


def generate_toy(out_dir, count: int, size: int, seed: int) -> DataConfig:
    """Write ``count`` image/label pairs plus a matching data.yaml."""
    images_dir = os.path.join(out_dir, "images")
    labels_dir = os.path.join(out_dir, "labels")
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(labels_dir, exist_ok=True)

    palette = np.zeros((len(CLASSES), 3), dtype=np.uint8)
    for c in CLASSES:
        palette[c.id] = c.color

    for index in range(count):
        rng = np.random.Generator(np.random.PCG64(stable_seed("toy", seed, index)))
        image, label = generate_sample(size, rng)
        sid = f"toy{index:05d}"
        imgio.save_image(image, os.path.join(images_dir, f"{sid}.png"))
        # labels stored as color maps to exercise the importer's color path
        imgio.save_image(palette[label], os.path.join(labels_dir, f"{sid}.png"))

    cfg = DataConfig(
        classes=CLASSES,
        inference_size=(size, size),
        dataset_location=os.path.join(out_dir, "standard"),
        split=(0.8, 0.2, 0.0),
    )
    save_config(cfg, os.path.join(out_dir, "data.yaml"))
    return cfg
