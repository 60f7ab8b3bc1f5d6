"""Image-quality metrics and the channel-activation diagnostic."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(pred: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    """PSNR in dB over all elements jointly; identical inputs give ``inf``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"psnr: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' filtering along the last two axes
    rows = sliding_window_view(img, g.size, axis=-2) @ g
    return sliding_window_view(rows, g.size, axis=-1) @ g


def ssim_map(pred: np.ndarray, target: np.ndarray, peak: float = 1.0) -> np.ndarray:
    """Local SSIM over every full 11x11 Gaussian window of (..., H, W) inputs."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim: {x.shape} vs {y.shape}")
    if x.shape[-1] < SSIM_WINDOW or x.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"ssim: images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window: {x.shape}")
    g = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(pred: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    """Mean SSIM; a (C, H, W) image is scored per channel and averaged."""
    return float(np.mean(ssim_map(pred, target, peak)))


@dataclass
class MetricReport:
    rows: list[tuple[str, float, float]] = field(default_factory=list)

    def add(self, image_id: str, psnr_db: float, ssim_value: float) -> None:
        self.rows.append((image_id, psnr_db, ssim_value))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else math.nan

    def to_text(self) -> str:
        lines = [f"{image_id} {_fmt(p)} {s:.6f}" for image_id, p, s in self.rows]
        lines.append(f"mean {_fmt(self.mean_psnr)} {self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        report = cls()
        for line in text.splitlines():
            image_id, p, s = line.split()
            if image_id != "mean":
                report.add(image_id, float(p), float(s))
        return report


def _fmt(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.6f}"


def channel_activation(feat: np.ndarray) -> np.ndarray:
    """Per-channel mean of ReLU(features) over batch and space: C values >= 0."""
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 4:
        raise ValueError(f"channel_activation: expected NCHW, got {feat.shape}")
    return np.maximum(feat, 0.0).mean(axis=(0, 2, 3))


def activation_table(values: np.ndarray) -> str:
    return "".join(f"{c} {v:.8g}\n" for c, v in enumerate(values))
