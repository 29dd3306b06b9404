"""Gaussian blur, repeated median filtering and color reversal.

Every transform takes a single ``(C, H, W)`` image or an ``(N, C, H, W)``
batch with values in [0, 1] and works channel by channel on the raw pixels
(before any model normalization).  Borders use reflect padding
(``d c b | a b c d``, the edge pixel is not repeated).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin

IMAGENET_MEANS = (0.485, 0.456, 0.406)
BLUR_SIGMAS = tuple(0.25 * i for i in range(21))
MEDIAN_TIMES = tuple(range(6))


def _as_batch(image) -> tuple[np.ndarray, bool]:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")
    return x, False


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="reflect")
    return sliding_window_view(padded, (k, k), axis=(2, 3))


def gaussian_kernel(sigma: float, kernel: int = 7) -> np.ndarray:
    """Normalized ``kernel x kernel`` Gaussian weights (a delta when sigma=0)."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("kernel size must be a positive odd integer")
    r = kernel // 2
    if sigma == 0:
        w = np.zeros((kernel, kernel))
        w[r, r] = 1.0
        return w
    d = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma**2))
    return w / w.sum()


def gaussian_blur(image, sigma: float, kernel: int = 7) -> np.ndarray:
    w = gaussian_kernel(sigma, kernel)
    x, single = _as_batch(image)
    if sigma == 0:
        out = x.copy()
    else:
        out = np.einsum("nchwij,ij->nchw", _windows(x, kernel), w)
        out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


def median_filter(image, times: int = 1, kernel: int = 5, chunk: int = 64) -> np.ndarray:
    """``times`` sequential passes of a ``kernel x kernel`` median."""
    if times < 0:
        raise ValueError("times must be nonnegative")
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("kernel size must be a positive odd integer")
    x, single = _as_batch(image)
    out = x.copy()
    for _ in range(times):
        for s in range(0, out.shape[0], chunk):
            part = out[s : s + chunk]
            out[s : s + chunk] = np.median(_windows(part, kernel), axis=(-2, -1))
    return out[0] if single else out


def color_reverse(image, means=IMAGENET_MEANS) -> np.ndarray:
    """``clamp(2 * mean_c - x_c, 0, 1)`` per channel."""
    x, single = _as_batch(image)
    m = np.asarray(means, dtype=np.float64)
    if m.ndim != 1 or m.shape[0] != x.shape[1]:
        raise ValueError(f"{m.size} means given for {x.shape[1]} channels")
    if np.any((m < 0) | (m > 1)):
        raise ValueError("means must lie in [0, 1]")
    out = np.clip(2.0 * m[None, :, None, None] - x, 0.0, 1.0)
    return out[0] if single else out


@dataclass(frozen=True)
class TransformSpec:
    """One setting of a transform: ``blur`` (sigma), ``median`` (times) or ``reverse``."""

    kind: str
    sigma: float = 0.0
    times: int = 0
    kernel: int | None = None
    means: tuple[float, ...] = IMAGENET_MEANS

    def __post_init__(self):
        if self.kind not in ("blur", "median", "reverse", "identity"):
            raise ValueError(f"unknown transform {self.kind!r}")
        if self.sigma < 0 or self.times < 0:
            raise ValueError("sigma and times must be nonnegative")

    @property
    def setting(self) -> float:
        return {"blur": self.sigma, "median": self.times}.get(self.kind, 0.0)

    @property
    def label(self) -> str:
        if self.kind == "blur":
            return f"blur:{self.sigma:g}"
        if self.kind == "median":
            return f"median:{self.times}"
        return self.kind

    def apply(self, images) -> np.ndarray:
        if self.kind == "blur":
            return gaussian_blur(images, self.sigma, self.kernel or 7)
        if self.kind == "median":
            return median_filter(images, self.times, self.kernel or 5)
        if self.kind == "reverse":
            return color_reverse(images, self.means)
        return np.array(images, dtype=np.float64)


def blur_grid(sigmas=BLUR_SIGMAS) -> list[TransformSpec]:
    return [TransformSpec("blur", sigma=float(s)) for s in sigmas]


def median_grid(times=MEDIAN_TIMES) -> list[TransformSpec]:
    return [TransformSpec("median", times=int(t)) for t in times]


class _ImageTransformer(TransformerMixin, BaseEstimator):
    def fit(self, X, y=None):
        _as_batch(X)
        return self


class GaussianBlur(_ImageTransformer):
    def __init__(self, sigma: float = 1.0, kernel: int = 7):
        self.sigma = sigma
        self.kernel = kernel

    def transform(self, X):
        return gaussian_blur(X, self.sigma, self.kernel)


class MedianFilter(_ImageTransformer):
    def __init__(self, times: int = 1, kernel: int = 5):
        self.times = times
        self.kernel = kernel

    def transform(self, X):
        return median_filter(X, self.times, self.kernel)


class ColorReverse(_ImageTransformer):
    def __init__(self, means=IMAGENET_MEANS):
        self.means = means

    def transform(self, X):
        return color_reverse(X, self.means)
