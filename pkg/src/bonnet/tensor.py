"""Dense 4-D tensor values with explicit memory layout and quantization metadata.

Every value flowing through the pipeline is a ``Tensor``: a 4-D numpy buffer
stored row-major in its layout's axis order, plus optional int8 quantization
parameters. Compute kernels (see :mod:`bonnet.ops`) operate on raw NCHW
arrays; ``Tensor`` is the typed wrapper passed between modules.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ShapeError


class Layout(Enum):
    NCHW = "nchw"
    NHWC = "nhwc"


class DType(Enum):
    FLOAT32 = "float32"
    FLOAT64 = "float64"
    INT8_QUANTIZED = "int8-quantized"


# Smallest scale the quantizer will emit; guards constant-zero ranges.
SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor affine quantization: real = scale * (q - zero_point)."""

    scale: float
    zero_point: int

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"quantization scale must be positive, got {self.scale}")
        if not -128 <= self.zero_point <= 127:
            raise ValueError(f"zero_point must lie in [-128, 127], got {self.zero_point}")


class Tensor:
    """4-D array with layout tag and optional quantization parameters.

    ``data`` is stored with shape in the layout's own axis order, so the flat
    buffer is row-major for that layout. ``dims`` always reports canonical
    (n, c, h, w) extents regardless of layout.
    """

    __slots__ = ("data", "layout", "quant")

    def __init__(self, data: np.ndarray, layout: Layout = Layout.NCHW,
                 quant: QuantParams | None = None):
        data = np.asarray(data)
        if data.ndim != 4:
            raise ShapeError(f"Tensor requires a 4-D buffer, got shape {data.shape}")
        if data.dtype == np.int8:
            if quant is None:
                raise ValueError("int8 tensors must carry quantization parameters")
        elif data.dtype in (np.float32, np.float64):
            if quant is not None:
                raise ValueError("float tensors must not carry quantization parameters")
        else:
            raise ValueError(f"unsupported element type {data.dtype}")
        self.data = data
        self.layout = layout
        self.quant = quant

    @property
    def dims(self) -> tuple[int, int, int, int]:
        n, a, b, c = self.data.shape
        if self.layout is Layout.NCHW:
            return (n, a, b, c)
        return (n, c, a, b)  # NHWC stores (n, h, w, c)

    @property
    def dtype(self) -> DType:
        if self.data.dtype == np.int8:
            return DType.INT8_QUANTIZED
        return DType.FLOAT32 if self.data.dtype == np.float32 else DType.FLOAT64

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def nchw(self) -> np.ndarray:
        """Raw buffer viewed in canonical NCHW axis order."""
        if self.layout is Layout.NCHW:
            return self.data
        return np.ascontiguousarray(self.data.transpose(0, 3, 1, 2))

    def __repr__(self):
        return (f"Tensor(dims={self.dims}, layout={self.layout.value}, "
                f"dtype={self.dtype.value})")


def from_nchw(array: np.ndarray, layout: Layout = Layout.NCHW,
              quant: QuantParams | None = None) -> Tensor:
    """Wrap a canonical NCHW array, materializing the requested layout."""
    array = np.asarray(array)
    if array.ndim != 4:
        raise ShapeError(f"expected 4-D array, got shape {array.shape}")
    if layout is Layout.NHWC:
        array = np.ascontiguousarray(array.transpose(0, 2, 3, 1))
    return Tensor(array, layout, quant)


def convert_layout(t: Tensor, target: Layout) -> Tensor:
    """Re-lay the buffer so element (n,c,h,w) is preserved exactly."""
    if t.layout is target:
        return Tensor(t.data.copy(), target, t.quant)
    if target is Layout.NHWC:  # NCHW -> NHWC
        moved = t.data.transpose(0, 2, 3, 1)
    else:  # NHWC -> NCHW
        moved = t.data.transpose(0, 3, 1, 2)
    return Tensor(np.ascontiguousarray(moved), target, t.quant)


def quantize_array(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """Quantize real values to int8 with round-half-to-even and saturation."""
    q = np.rint(x / qp.scale) + qp.zero_point
    return np.clip(q, -128, 127).astype(np.int8)


def dequantize_array(q: np.ndarray, qp: QuantParams) -> np.ndarray:
    return ((q.astype(np.float32) - qp.zero_point) * np.float32(qp.scale)).astype(np.float32)


def weight_qparams(w: np.ndarray) -> QuantParams:
    """Symmetric per-tensor parameters: zero_point 0, scale max|w|/127."""
    scale = float(np.max(np.abs(w))) / 127.0
    return QuantParams(max(scale, SCALE_FLOOR), 0)


def activation_qparams(lo: float, hi: float) -> QuantParams:
    """Asymmetric per-tensor parameters from a calibrated [lo, hi] range."""
    lo = min(float(lo), 0.0)  # keep zero representable
    hi = max(float(hi), 0.0)
    scale = (hi - lo) / 255.0
    scale = max(scale, SCALE_FLOOR)
    zp = int(round(-lo / scale)) - 128
    return QuantParams(scale, max(-128, min(127, zp)))


def fake_quant(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """Round-trip through int8; the reference quantized execution step."""
    return dequantize_array(quantize_array(x, qp), qp)
