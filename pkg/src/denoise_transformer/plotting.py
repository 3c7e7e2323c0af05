"""Figure rendering for training curves and ablation tables."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}
FORMATS = ("png", "svg")


def _save(fig, stem: Path) -> list[Path]:
    paths = []
    for ext in FORMATS:
        p = stem.with_suffix("." + ext)
        fig.savefig(p)
        paths.append(p)
    plt.close(fig)
    return paths


def _mark_max(ax, xs, ys, fmt):
    pts = [(x, y) for x, y in zip(xs, ys) if y is not None and not math.isnan(y)]
    if not pts:
        return
    bx, by = max(pts, key=lambda t: t[1])
    ax.plot([bx], [by], "o", color="C3", ms=5)
    ax.annotate(f"max {fmt.format(by)} @ {bx}", (bx, by), textcoords="offset points",
                xytext=(0, 6), ha="center", color="C3")


def plot_curve(curve: list[dict], stem) -> list[Path]:
    """Validation PSNR/SSIM and training loss per epoch, maxima annotated."""
    stem = Path(stem)
    epochs = [r["epoch"] for r in curve]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(9, 2.6))
        series = [("val_psnr", "PSNR (dB)", "{:.2f}"), ("val_ssim", "SSIM", "{:.4f}"),
                  ("loss", "masked L2 loss", None)]
        for ax, (key, label, fmt) in zip(axes, series):
            ys = [r.get(key) for r in curve]
            ys = [math.nan if y is None else y for y in ys]
            ax.plot(epochs, ys, "-", marker=".", color="C0")
            ax.set_xlabel("epoch")
            ax.set_ylabel(label)
            if fmt:
                _mark_max(ax, epochs, ys, fmt)
        fig.tight_layout()
        return _save(fig, stem)


def plot_ablation(rows: list[dict], stem) -> list[Path]:
    """Bar chart of seed-averaged PSNR per variant with per-seed points."""
    stem = Path(stem)
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        for i, v in enumerate(variants):
            vals = [r["psnr"] for r in rows if r["variant"] == v]
            ax.bar(i, sum(vals) / len(vals), color="C0", alpha=0.6)
            ax.plot([i] * len(vals), vals, "k.", ms=4)
        ax.set_xticks(range(len(variants)), variants)
        ax.set_ylabel("validation PSNR (dB)")
        lo = min(r["psnr"] for r in rows)
        hi = max(r["psnr"] for r in rows)
        ax.set_ylim(lo - 0.5, hi + 0.3)
        fig.tight_layout()
        return _save(fig, stem)
