"""PNG input/output and shared resampling helpers.

All resize paths in the toolkit (augmentation, inference preprocess and
postprocess, overlays) go through these resamplers so that CLI and service
outputs stay byte-identical.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

from . import ops
from .errors import DatasetError


def load_image(path) -> np.ndarray:
    """RGB uint8 (h, w, 3)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def load_label_file(path) -> np.ndarray:
    """Label file as stored: (h, w) id map or (h, w, 3) color map."""
    with Image.open(path) as im:
        if im.mode in ("L", "P", "I", "I;16"):
            return np.asarray(im.convert("L"), dtype=np.uint8)
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        return arr


def save_image(array: np.ndarray, path):
    Image.fromarray(array.astype(np.uint8)).save(path, format="PNG")


def encode_mask_png(labels: np.ndarray) -> bytes:
    """Single-channel PNG of class ids; the canonical mask byte encoding."""
    buf = io.BytesIO()
    Image.fromarray(labels.astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def encode_image_png(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array.astype(np.uint8), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_image_bytes(data: bytes) -> np.ndarray:
    """Decode PNG/JPEG bytes to RGB uint8; raises DatasetError on garbage."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise DatasetError(f"cannot decode image: {exc}") from exc


def resize_bilinear_hw3(image: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize of an (h, w, 3) float or uint8 image; returns float32."""
    x = image.astype(np.float32).transpose(2, 0, 1)[None]
    y = ops.resize_bilinear(x, out_h, out_w)
    return y[0].transpose(1, 2, 0)


def resize_nearest_2d(labels: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Nearest-neighbor resize of an (h, w) map; preserves label discreteness."""
    h, w = labels.shape
    ys = np.clip(np.floor((np.arange(out_h) + 0.5) * (h / out_h)), 0, h - 1).astype(np.int64)
    xs = np.clip(np.floor((np.arange(out_w) + 0.5) * (w / out_w)), 0, w - 1).astype(np.int64)
    return labels[ys[:, None], xs[None, :]]


def colorize(mask: np.ndarray, class_colors, image: np.ndarray | None = None,
             alpha: float = 0.5) -> np.ndarray:
    """Color a label mask; alpha-blend over ``image`` when one is given."""
    palette = np.asarray(class_colors, dtype=np.float64)
    if mask.max(initial=0) >= len(palette):
        raise DatasetError(
            f"mask contains class id {int(mask.max())} with no color "
            f"(table has {len(palette)})")
    colored = palette[mask.astype(np.int64)]
    if image is None:
        return colored.astype(np.uint8)
    blended = alpha * colored + (1.0 - alpha) * image.astype(np.float64)
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)
