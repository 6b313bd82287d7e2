"""Evaluation metrics: relevance ratio, image distances, boundary proximity.

All functions are pure. Images are HxWxC float arrays in [0, 1] (or
ImageTensor, accepted interchangeably); RGB inputs are reduced to luminance
before structural comparison.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import ImageTensor, LogitVector, logit_margin
from .errors import ValidationError

# Canonical five-scale exponent weights. They sum to 1.0001 as published;
# ms_ssim renormalizes whatever prefix it uses so the exponents always sum
# to exactly 1 (keeping self-similarity at exactly 1.0).
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WINDOW_SIZE = 11
_WINDOW_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03
# ITU-R BT.601 luminance coefficients.
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class MetricReport:
    """Aggregate metric values for one run (means over probed inputs)."""

    r_relevance: float | None
    ms_ssim: float
    d2_image: float
    d2_boundary: float
    counts: dict

    def to_json(self) -> dict:
        return {
            "r_relevance": self.r_relevance,
            "ms_ssim": self.ms_ssim,
            "d2_image": self.d2_image,
            "d2_boundary": self.d2_boundary,
            "counts": dict(self.counts),
        }


def r_relevance(n_relevant: int, n_spurious: int) -> float | None:
    """Fraction of influential channels judged task-relevant.

    Returns None (undefined) when no channel was judged either way.
    """
    if n_relevant < 0 or n_spurious < 0:
        raise ValidationError("counts must be non-negative")
    total = n_relevant + n_spurious
    if total == 0:
        return None
    return n_relevant / total


def _as_array(image) -> np.ndarray:
    if isinstance(image, ImageTensor):
        return image.data
    return np.asarray(image, dtype=np.float64)


def d2_image(x_i, x_j) -> float:
    """L2 distance normalized by the L2 norm of the all-ones image."""
    a, b = _as_array(x_i), _as_array(x_j)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b) / np.sqrt(a.size))


def d2_boundary(logits: LogitVector) -> float:
    """Proximity to the decision boundary: |logit| for K=1 (binary and the
    detection shim's scalar score), top1-top2 gap for multiclass."""
    return logit_margin(logits)


def to_grayscale(image) -> np.ndarray:
    """Luminance reduction (BT.601); pass-through for single-channel input."""
    arr = _as_array(image)
    if arr.ndim == 2:
        return arr
    if arr.ndim != 3:
        raise ValidationError("expected HxW or HxWxC image")
    if arr.shape[2] == 1:
        return arr[:, :, 0]
    if arr.shape[2] != 3:
        raise ValidationError(f"unsupported channel count {arr.shape[2]}")
    return arr @ _LUMA


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only fully-supported (valid) pixels."""
    out = ndimage.convolve1d(img, window, axis=0, mode="constant")
    out = ndimage.convolve1d(out, window, axis=1, mode="constant")
    pad = (window.size - 1) // 2
    return out[pad:img.shape[0] - pad, pad:img.shape[1] - pad]


def _ssim_components(a: np.ndarray, b: np.ndarray, window: np.ndarray):
    c1 = _K1 * _K1
    c2 = _K2 * _K2
    mu_a = _filter_valid(a, window)
    mu_b = _filter_valid(b, window)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    sigma_aa = _filter_valid(a * a, window) - mu_aa
    sigma_bb = _filter_valid(b * b, window) - mu_bb
    sigma_ab = _filter_valid(a * b, window) - mu_ab
    luminance = (2.0 * mu_ab + c1) / (mu_aa + mu_bb + c1)
    cs = (2.0 * sigma_ab + c2) / (sigma_aa + sigma_bb + c2)
    return float(np.mean(luminance * cs)), float(np.mean(cs))


def _downsample(img: np.ndarray) -> np.ndarray:
    """Non-overlapping 2x2 mean pooling; odd trailing rows/cols are dropped."""
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    c = img[:h, :w]
    return 0.25 * (c[0::2, 0::2] + c[1::2, 0::2] + c[0::2, 1::2] + c[1::2, 1::2])


def effective_scale_count(shape, scales: int = 5,
                          window_size: int = _WINDOW_SIZE) -> int:
    """Largest usable scale count: every level must fit the filter window."""
    usable = 0
    side = min(shape[0], shape[1])
    while usable < scales and side >= window_size:
        usable += 1
        side //= 2
    return usable


def ms_ssim(x_i, x_j, scales: int = 5) -> float:
    """Multi-scale structural similarity on luminance.

    Gaussian window 11 (sigma 1.5), valid filtering, 2x2 mean-pool pyramid,
    exponent weights per the canonical five-scale setting. When the images
    cannot support the requested pyramid depth the scale count is reduced
    (with a warning) and the truncated weights are renormalized. Negative
    contrast-structure responses are clamped at zero before exponentiation,
    so the result lies in [0, 1].
    """
    a = to_grayscale(x_i)
    b = to_grayscale(x_j)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not 1 <= scales <= len(MSSSIM_WEIGHTS):
        raise ValidationError(
            f"scales must be in [1, {len(MSSSIM_WEIGHTS)}]"
        )
    usable = effective_scale_count(a.shape, scales)
    if usable == 0:
        raise ValidationError(
            f"image {a.shape} smaller than the {_WINDOW_SIZE}px filter window"
        )
    if usable < scales:
        warnings.warn(
            f"image {a.shape} supports only {usable} of {scales} scales; "
            "weights renormalized",
            stacklevel=2,
        )
    weights = np.asarray(MSSSIM_WEIGHTS[:usable])
    weights = weights / weights.sum()
    window = _gaussian_window(_WINDOW_SIZE, _WINDOW_SIGMA)

    value = 1.0
    for level in range(usable):
        ssim_mean, cs_mean = _ssim_components(a, b, window)
        if level == usable - 1:
            value *= max(ssim_mean, 0.0) ** weights[level]
        else:
            value *= max(cs_mean, 0.0) ** weights[level]
            a = _downsample(a)
            b = _downsample(b)
    return float(value)
