"""Image quality metrics and error maps."""

from __future__ import annotations

import math

import numpy as np

from .fluxrender import GrayImage
from .io import quantize


def _pair(a, b, quantized_bits: int | None):
    p = a.data if isinstance(a, GrayImage) else np.asarray(a, dtype=float)
    q = b.data if isinstance(b, GrayImage) else np.asarray(b, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"image sizes differ: {p.shape} vs {q.shape}")
    if quantized_bits:
        m = (1 << quantized_bits) - 1
        p = quantize(p, m) / m
        q = quantize(q, m) / m
    return p, q


def mae(a, b, c_max: float = 1.0, quantized_bits: int | None = None) -> float:
    """Mean of ``|p - q| / C_max`` over all pixels."""
    p, q = _pair(a, b, quantized_bits)
    return float(np.mean(np.abs(p - q)) / c_max)


def psnr(a, b, c_max: float = 1.0, quantized_bits: int | None = None) -> float:
    """``10 log10(C_max^2 / MSE)`` in dB; ``inf`` for identical images."""
    p, q = _pair(a, b, quantized_bits)
    mse = float(np.mean((p - q) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(c_max * c_max / mse)


def error_map(a, b, c_max: float = 1.0) -> GrayImage:
    p, q = _pair(a, b, None)
    return GrayImage(np.clip(np.abs(p - q) / c_max, 0.0, 1.0))


def format_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"
