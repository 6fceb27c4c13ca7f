"""Image-quality metrics and HSV distribution analysis."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.ndimage import correlate1d
from scipy.special import kolmogorov

__all__ = [
    "psnr",
    "ssim",
    "rgb_to_hsv",
    "hsv_to_rgb",
    "hsv_histograms",
    "ks_two_sample",
    "HsvStats",
    "hsv_compare",
    "format_ks",
    "format_hsv_report",
    "ViewMetrics",
    "MetricReport",
    "evaluate_views",
    "write_report_csv",
    "format_table",
]


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _filter(img, kernel):
    out = correlate1d(img, kernel, axis=0, mode="nearest")
    out = correlate1d(out, kernel, axis=1, mode="nearest")
    r = len(kernel) // 2
    return out[r : img.shape[0] - r, r : img.shape[1] - r]


def ssim(a, b, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean structural similarity with a Gaussian window.

    Colour images are scored per channel and averaged. Statistics use the
    population (biased) covariance and only fully covered window positions.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < win_size:
        raise ValueError(f"images smaller than the {win_size}px SSIM window")
    kernel = _gaussian_kernel(win_size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter(x, kernel), _filter(y, kernel)
        vx = _filter(x * x, kernel) - mx * mx
        vy = _filter(y * y, kernel) - my * my
        cxy = _filter(x * y, kernel) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        scores.append(s.mean())
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# HSV


def rgb_to_hsv(rgb) -> np.ndarray:
    """Hexcone conversion; every channel of the result is scaled to [0, 255]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(-1)
    c = v - rgb.min(-1)
    s = np.where(v > 0, c / np.where(v > 0, v, 1), 0.0)
    safe = np.where(c > 0, c, 1)
    h = np.where(
        v == r,
        ((g - b) / safe) % 6,
        np.where(v == g, (b - r) / safe + 2, (r - g) / safe + 4),
    )
    h = np.where(c > 0, h / 6.0, 0.0)
    return np.stack([h, s, v], -1) * 255.0


def hsv_to_rgb(hsv) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64) / 255.0
    h, s, v = hsv[..., 0] * 6.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(hsv.shape)
    for k, (r, g, b) in enumerate(choices):
        m = i == k
        out[..., 0] = np.where(m, r, out[..., 0])
        out[..., 1] = np.where(m, g, out[..., 1])
        out[..., 2] = np.where(m, b, out[..., 2])
    return out


def hsv_histograms(img, bins: int = 256) -> np.ndarray:
    """``(3, bins)`` pixel counts for H, S and V on the [0, 255] axis."""
    hsv = rgb_to_hsv(img).reshape(-1, 3)
    return np.stack([np.histogram(hsv[:, k], bins=bins, range=(0.0, 255.0))[0] for k in range(3)])


def ks_two_sample(a, b) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("KS test needs two nonempty samples")
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / a.size
    fb = np.searchsorted(b, pooled, side="right") / b.size
    d = float(np.max(np.abs(fa - fb)))
    en = math.sqrt(a.size * b.size / (a.size + b.size))
    p = float(min(max(kolmogorov(en * d), 0.0), 1.0)) if d > 0 else 1.0
    return d, p


@dataclass
class HsvStats:
    name_a: str
    name_b: str
    histograms_a: np.ndarray
    histograms_b: np.ndarray
    ks: dict[str, tuple[float, float]]  # channel -> (statistic, p)


def hsv_compare(img_a, img_b, name_a: str = "GT", name_b: str = "model") -> HsvStats:
    ha, hb = rgb_to_hsv(img_a).reshape(-1, 3), rgb_to_hsv(img_b).reshape(-1, 3)
    ks = {ch: ks_two_sample(ha[:, k], hb[:, k]) for k, ch in enumerate("HSV")}
    return HsvStats(name_a, name_b, hsv_histograms(img_a), hsv_histograms(img_b), ks)


def _p_text(p: float) -> str:
    if p < 1e-5:
        return "p < 10^-5"
    if p < 1e-3:
        return f"p = {p:.1e}"
    return f"p = {p:.3f}"


def format_ks(stats: HsvStats, channel: str = "H") -> str:
    """One comparison line, e.g. ``GT vs. classical (KS = 0.0342, p < 10^-5)``."""
    d, p = stats.ks[channel]
    return f"{stats.name_a} vs. {stats.name_b} (KS = {d:.4f}, {_p_text(p)})"


def format_hsv_report(stats_list: Sequence[HsvStats]) -> str:
    lines = []
    for ch, label in zip("HSV", ("Hue", "Saturation", "Value")):
        lines.append(f"{label}:")
        lines.extend(f"  {format_ks(s, ch)}" for s in stats_list)
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# reports


@dataclass
class ViewMetrics:
    view: int
    psnr: float
    ssim: float
    extra: dict[str, float] = field(default_factory=dict)


@dataclass
class MetricReport:
    views: list[ViewMetrics]
    config: str = ""
    layers: str = ""
    width: str = ""
    params: int | None = None

    def mean(self, key: str) -> float:
        vals = [getattr(v, key) if key in ("psnr", "ssim") else v.extra[key] for v in self.views]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def extra_keys(self) -> list[str]:
        keys: list[str] = []
        for v in self.views:
            keys.extend(k for k in v.extra if k not in keys)
        return keys


MetricPlugin = Callable[[np.ndarray, np.ndarray], float]


def evaluate_views(
    predictions: Mapping[int, np.ndarray],
    targets: Mapping[int, np.ndarray],
    plugins: Mapping[str, MetricPlugin] | None = None,
    external: Mapping[str, Mapping[int, float]] | None = None,
    **info,
) -> MetricReport:
    """Per-view PSNR/SSIM. ``plugins`` are extra metric callables and
    ``external`` merges precomputed per-view scores (e.g. a perceptual metric
    computed elsewhere)."""
    views = []
    for idx in sorted(predictions):
        pred, gt = predictions[idx], targets[idx]
        extra = {name: float(fn(pred, gt)) for name, fn in (plugins or {}).items()}
        for name, scores in (external or {}).items():
            if idx in scores:
                extra[name] = float(scores[idx])
        views.append(ViewMetrics(idx, psnr(pred, gt), ssim(pred, gt), extra))
    return MetricReport(views, **info)


def write_report_csv(report: MetricReport, path) -> None:
    keys = report.extra_keys
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view", "psnr", "ssim", *keys])
        for v in report.views:
            w.writerow([v.view, f"{v.psnr:.6f}", f"{v.ssim:.6f}", *(f"{v.extra.get(k, math.nan):.6f}" for k in keys)])
        w.writerow(["mean", f"{report.mean('psnr'):.6f}", f"{report.mean('ssim'):.6f}", *(f"{report.mean(k):.6f}" for k in keys)])


def format_table(reports: Sequence[MetricReport]) -> str:
    """Plain-text comparison table: config, layers, width, params, PSNR, SSIM."""
    header = ["Config", "Layers", "Width", "Params", "PSNR", "SSIM"]
    rows = [
        [r.config, r.layers, r.width, "" if r.params is None else f"{r.params:,}", f"{r.mean('psnr'):.2f}", f"{r.mean('ssim'):.4f}"]
        for r in reports
    ]
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    lines.extend(fmt.format(*row) for row in rows)
    return "\n".join(lines)
