"""Image quality metrics, metric tables, and ROI characteristic reports.

Metrics operate on single-channel images in [0,1] with dynamic range
1.  SSIM uses the reference parameterization (Gaussian 11x11 window,
sigma 1.5, K1=0.01, K2=0.03) with valid-mode windows, so no padding
bias enters near borders.  PSNR of identical images is reported as
+infinity rather than raising.

Reports render as an aligned text table sorted by SSIM descending, a
CSV (`model,ssim,psnr_db,rmse`), and static PNG plots.  RMSE appears
in the text table scaled by 100, matching how such results are
conventionally quoted.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.signal import convolve2d

from .errors import InputError

GAUSSIAN_SIZE = 11
GAUSSIAN_SIGMA = 1.5
DYNAMIC_RANGE = 1.0
C1 = (0.01 * DYNAMIC_RANGE) ** 2
C2 = (0.03 * DYNAMIC_RANGE) ** 2
RANGE_TOL = 1e-6


def _check_pair(a, b, who):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise InputError(f"{who} expects 2D images, got {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise InputError(f"{who} inputs must share a shape, got {a.shape} vs {b.shape}")
    for name, arr in (("first", a), ("second", b)):
        lo, hi = float(arr.min()), float(arr.max())
        if lo < -RANGE_TOL or hi > DYNAMIC_RANGE + RANGE_TOL:
            raise InputError(
                f"{who} {name} image outside [0,{DYNAMIC_RANGE:g}]: range [{lo:g}, {hi:g}]"
            )
    return a, b


def _gaussian_kernel(size=GAUSSIAN_SIZE, sigma=GAUSSIAN_SIGMA):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b):
    """Mean local structural similarity over valid window positions."""
    a, b = _check_pair(a, b, "ssim")
    if min(a.shape) < GAUSSIAN_SIZE:
        raise InputError(
            f"ssim needs images of at least {GAUSSIAN_SIZE}x{GAUSSIAN_SIZE}, got {a.shape}"
        )
    kernel = _gaussian_kernel()
    mu_a = convolve2d(a, kernel, mode="valid")
    mu_b = convolve2d(b, kernel, mode="valid")
    mu_aa = convolve2d(a * a, kernel, mode="valid")
    mu_bb = convolve2d(b * b, kernel, mode="valid")
    mu_ab = convolve2d(a * b, kernel, mode="valid")
    var_a = mu_aa - mu_a * mu_a
    var_b = mu_bb - mu_b * mu_b
    cov = mu_ab - mu_a * mu_b
    score = ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2)) / (
        (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    )
    return float(score.mean())


def rmse(a, b):
    """Root mean squared pixel difference."""
    a, b = _check_pair(a, b, "rmse")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a, b):
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    a, b = _check_pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(DYNAMIC_RANGE**2 / mse)


@dataclasses.dataclass
class MetricsRow:
    """One table row; metric fields are None when the model is absent."""

    model: str
    ssim: Optional[float] = None
    psnr_db: Optional[float] = None
    rmse: Optional[float] = None

    @property
    def available(self):
        return self.ssim is not None


def metrics_row(model, references, candidates):
    """Mean metrics of `candidates` against `references`, slice by slice."""
    references = list(references)
    candidates = list(candidates)
    if len(references) != len(candidates):
        raise InputError(
            f"{model}: {len(candidates)} outputs for {len(references)} references"
        )
    if not references:
        raise InputError(f"{model}: empty evaluation set")
    ssims, psnrs, rmses = [], [], []
    for ref, cand in zip(references, candidates):
        ssims.append(ssim(ref, cand))
        psnrs.append(psnr(ref, cand))
        rmses.append(rmse(ref, cand))
    return MetricsRow(
        model=model,
        ssim=float(np.mean(ssims)),
        psnr_db=float(np.mean(psnrs)),
        rmse=float(np.mean(rmses)),
    )


def evaluate_outputs(references, outputs_by_model):
    """Build rows for each model; `None` outputs become absent rows.

    Returns rows sorted by SSIM descending with absent rows last, the
    presentation order of the text table and CSV.
    """
    rows = []
    for model, outputs in outputs_by_model.items():
        if outputs is None:
            rows.append(MetricsRow(model=model))
        else:
            rows.append(metrics_row(model, references, outputs))
    rows.sort(key=lambda r: (not r.available, -(r.ssim if r.available else 0.0), r.model))
    return rows


def format_metrics_table(rows):
    header = f"{'model':<20} {'SSIM':>8} {'PSNR (dB)':>10} {'RMSE (x100)':>12}"
    lines = [header, "-" * len(header)]
    for row in rows:
        if not row.available:
            lines.append(f"{row.model:<20} {'absent':>8} {'absent':>10} {'absent':>12}")
            continue
        lines.append(
            f"{row.model:<20} {row.ssim:>8.4f} {row.psnr_db:>10.3f} {100.0 * row.rmse:>12.4f}"
        )
    return "\n".join(lines) + "\n"


def write_metrics_csv(rows, path):
    lines = ["model,ssim,psnr_db,rmse"]
    for row in rows:
        if row.available:
            lines.append(
                f"{row.model},{row.ssim:.6f},{row.psnr_db:.6f},{row.rmse:.6f}"
            )
        else:
            lines.append(f"{row.model},,,")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclasses.dataclass(frozen=True)
class RoiWindow:
    """Rectangular window (top-left row/col plus height/width)."""

    row: int
    col: int
    height: int
    width: int

    def check_within(self, shape):
        ok = (
            self.height > 0
            and self.width > 0
            and 0 <= self.row <= shape[0] - self.height
            and 0 <= self.col <= shape[1] - self.width
        )
        if not ok:
            raise InputError(
                f"ROI {self} outside a {shape[0]}x{shape[1]} image; valid top-left "
                f"range is rows [0, {shape[0] - self.height}], cols [0, {shape[1] - self.width}] "
                f"for that window size"
            )

    @property
    def slices(self):
        return (
            slice(self.row, self.row + self.height),
            slice(self.col, self.col + self.width),
        )


def default_roi(reference, size=16):
    """Window over the brightest smoothed region (the dense structure)."""
    ref = np.asarray(reference, dtype=np.float64)
    if ref.ndim != 2 or min(ref.shape) < size:
        raise InputError(f"cannot place a {size}x{size} ROI on image of shape {ref.shape}")
    smoothed = uniform_filter(ref, size=size, mode="constant")
    center = np.unravel_index(int(np.argmax(smoothed)), smoothed.shape)
    row = int(np.clip(center[0] - size // 2, 0, ref.shape[0] - size))
    col = int(np.clip(center[1] - size // 2, 0, ref.shape[1] - size))
    return RoiWindow(row=row, col=col, height=size, width=size)


@dataclasses.dataclass
class RoiReport:
    """ROI statistics per model plus reference-minus-model difference maps."""

    window: RoiWindow
    means: dict
    stds: dict
    difference_maps: dict


def roi_report(reference, images_by_model, window):
    """Mean/std of each model inside the ROI and exact difference maps."""
    ref = np.asarray(reference, dtype=np.float64)
    if ref.ndim != 2:
        raise InputError(f"roi_report expects a 2D reference, got {ref.shape}")
    window.check_within(ref.shape)
    rows, cols = window.slices
    ref_patch = ref[rows, cols]
    means, stds, diffs = {}, {}, {}
    for model, image in images_by_model.items():
        img = np.asarray(image, dtype=np.float64)
        if img.shape != ref.shape:
            raise InputError(
                f"{model}: image shape {img.shape} does not match reference {ref.shape}"
            )
        patch = img[rows, cols]
        means[model] = float(patch.mean())
        stds[model] = float(patch.std())
        diffs[model] = ref_patch - patch
    return RoiReport(window=window, means=means, stds=stds, difference_maps=diffs)


def save_comparison_plot(path, reference, images_by_model, window=None):
    """Grid of reference-minus-model difference images, one panel per model."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ref = np.asarray(reference, dtype=np.float64)
    names = list(images_by_model)
    fig, axes = plt.subplots(1, max(len(names), 1), figsize=(3 * max(len(names), 1), 3.2))
    if len(names) <= 1:
        axes = [axes]
    span = 0.2
    for ax, name in zip(axes, names):
        diff = ref - np.asarray(images_by_model[name], dtype=np.float64)
        ax.imshow(diff, cmap="gray", vmin=-span, vmax=span)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
        if window is not None:
            rows, cols = window.slices
            ax.add_patch(
                plt.Rectangle(
                    (cols.start, rows.start),
                    window.width,
                    window.height,
                    fill=False,
                    edgecolor="red",
                    linewidth=1.0,
                )
            )
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_roi_bar_chart(path, report):
    """Bar chart of ROI mean with std error bars, one bar per model."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(report.means)
    means = [report.means[n] for n in names]
    stds = [report.stds[n] for n in names]
    fig, ax = plt.subplots(figsize=(1.2 * max(len(names), 3), 3.2))
    ax.bar(range(len(names)), means, yerr=stds, capsize=4, color="steelblue")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("ROI mean intensity")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
