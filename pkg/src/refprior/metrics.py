"""PSNR, SSIM and patch pixel error, plus report assembly."""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
CATEGORY_BOUNDS = (0.33, 0.5)


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for peak 1.0, capped at 100 dB."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable Gaussian filter over the valid (unpadded) region of a 2-D array."""
    k = g.size
    h, w = img.shape
    rows = sum(g[i] * img[i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def _ssim_channel(x, y, g, c1, c2):
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x * mu_x
    syy = _filter_valid(y * y, g) - mu_y * mu_y
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a, b):
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, range 1.

    Computed per channel over valid window positions, averaged over positions
    and then channels. Accepts ``(H, W)`` or ``(H, W, C)``.
    """
    a, b = _same_shape(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = _gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], g, c1, c2) for c in range(a.shape[2])]))


def patch_pixel_error(pred, truth):
    """Return ``(error in 8-bit pixel units, normalised MAE)`` between two prior maps."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prior grids differ: {pred.shape} vs {truth.shape}")
    mae = float(np.mean(np.abs(pred - truth)))
    return mae * 255.0, mae


def category(global_prior):
    weak, moderate = CATEGORY_BOUNDS
    if global_prior < weak:
        return "weak"
    if global_prior < moderate:
        return "moderate"
    return "strong"


REPORT_COLUMNS = ("id", "category", "truth_global_prior", "psnr_db", "ssim", "ppe_grid1", "ppe_grid7")


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def add(self, **row):
        self.rows.append({k: row.get(k) for k in REPORT_COLUMNS})

    def aggregate(self, rows=None):
        rows = self.rows if rows is None else rows
        out = {"count": len(rows)}
        for key in ("psnr_db", "ssim", "ppe_grid1", "ppe_grid7"):
            values = [r[key] for r in rows if r[key] is not None]
            out[key] = float(np.mean(values)) if values else None
        return out

    def by_category(self):
        out = {}
        for name in ("weak", "moderate", "strong"):
            rows = [r for r in self.rows if r["category"] == name]
            if rows:
                out[name] = self.aggregate(rows)
        return out

    def to_csv(self):
        """Per-sample rows in ``REPORT_COLUMNS`` order; empty cells for absent values."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow(["" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in REPORT_COLUMNS])
        return buf.getvalue()

    def table(self):
        lines = [f"{'subset':<10} {'n':>4} {'PSNR(dB)':>9} {'SSIM':>7}"]
        groups = [("all", self.aggregate())] + list(self.by_category().items())
        for name, agg in groups:
            lines.append(f"{name:<10} {agg['count']:>4} {agg['psnr_db']:>9.3f} {agg['ssim']:>7.4f}")
        agg = self.aggregate()
        if agg["ppe_grid1"] is not None:
            lines.append(f"patch pixel error: grid1 {agg['ppe_grid1']:.3f}  grid7 {agg['ppe_grid7']:.3f}")
        return "\n".join(lines)
