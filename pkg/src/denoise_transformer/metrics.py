"""PSNR / SSIM and evaluation reports."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ShapeError

PSNR_DISPLAY_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def psnr(a, b, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(peak ** 2 / mse))


def capped(value: float) -> float:
    return min(value, PSNR_DISPLAY_CAP)


def _gaussian_window() -> np.ndarray:
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    y = ndimage.correlate1d(x, g, axis=0, mode="constant")
    y = ndimage.correlate1d(y, g, axis=1, mode="constant")
    r = len(g) // 2
    return y[r:-r, r:-r]


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels.

    Only windows fully inside the image contribute.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise ShapeError(f"expected HxW or HxWxC images, got shape {a.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = _gaussian_window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        vx = _filter_valid(x * x, g) - mx * mx
        vy = _filter_valid(y * y, g) - my * my
        cxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


@dataclass
class EvalResult:
    names: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def add(self, name: str, denoised, clean) -> None:
        self.names.append(name)
        self.psnr.append(psnr(denoised, clean))
        self.ssim.append(ssim(denoised, clean))

    def __len__(self) -> int:
        return len(self.names)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([capped(p) for p in self.psnr])) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan


def evaluate(pairs) -> EvalResult:
    """``pairs`` yields ``(name, denoised, clean)``."""
    result = EvalResult()
    for name, denoised, clean in pairs:
        result.add(name, denoised, clean)
    return result


def write_summary_csv(result: EvalResult, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "psnr_db", "ssim"])
        for name, p, s in zip(result.names, result.psnr, result.ssim):
            w.writerow([name, f"{capped(p):.6f}", f"{s:.6f}"])
        if len(result):
            w.writerow(["mean", f"{result.mean_psnr:.6f}", f"{result.mean_ssim:.6f}"])
    return path


def emit_report(result: EvalResult, curve: list[dict], out_dir) -> list[Path]:
    """Write ``summary.csv`` and, for a non-empty curve, ``curve.png``/``curve.svg``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_summary_csv(result, out_dir / "summary.csv")]
    if curve:
        from .plotting import plot_curve
        written += plot_curve(curve, out_dir / "curve")
    return written
