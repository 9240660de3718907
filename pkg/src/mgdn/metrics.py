"""Full-reference and no-reference image quality metrics (numpy, evaluation only)."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import MU, mu_law_tonemap

PSNR_CAP = 99.0
METRIC_NAMES = ("psnr", "psnr_mu", "psnr_linear", "ssim", "nmi", "entropy", "rmse")


def _pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Standard PSNR in dB; identical inputs report PSNR_CAP."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def psnr_mu(a_linear, b_linear, mu: float = MU) -> float:
    return psnr(mu_law_tonemap(a_linear, mu), mu_law_tonemap(b_linear, mu))


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_channel(x, y, win, c1, c2):
    if x.shape[0] < win.shape[0] or x.shape[1] < win.shape[1]:
        mx, my = x.mean(), y.mean()
        vx, vy = x.var(), y.var()
        cov = ((x - mx) * (y - my)).mean()
        return ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    r = win.shape[0] // 2

    def filt(z):
        return ndimage.correlate(z, win, mode="constant")[r:-r or None, r:-r or None]

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cov = filt(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return s.mean()


def ssim(a, b, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03,
         win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.

    Images smaller than the window fall back to one global (unweighted) window.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = gaussian_window(win_size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], win, c1, c2)
                          for c in range(a.shape[2])]))


def _hist_entropy(counts: np.ndarray, base=np.e) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum() / np.log(base))


def _edges(x: np.ndarray, bins: int):
    lo, hi = float(x.min()), float(x.max())
    return np.linspace(lo, hi, bins + 1)


def nmi_metric(a, b, bins: int = 64) -> float:
    """2 I(A;B) / (H(A) + H(B)) from a hard joint histogram of all values."""
    a, b = _pair(a, b)
    a, b = a.ravel(), b.ravel()
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        warnings.warn("nmi_metric: constant input, returning 0", RuntimeWarning)
        return 0.0
    joint, _, _ = np.histogram2d(a, b, bins=[_edges(a, bins), _edges(b, bins)])
    ha = _hist_entropy(joint.sum(axis=1))
    hb = _hist_entropy(joint.sum(axis=0))
    hab = _hist_entropy(joint.ravel())
    return float(2.0 * (ha + hb - hab) / (ha + hb))


def entropy_metric(a, bins: int = 256, value_range=(0.0, 1.0)) -> float:
    """Shannon entropy (bits) of the hard histogram of all values."""
    a = np.asarray(a, dtype=np.float64).ravel()
    counts, _ = np.histogram(np.clip(a, *value_range), bins=bins, range=value_range)
    return _hist_entropy(counts, base=2)


def evaluate_pair(fused, gt, task: str, mu: float = MU) -> dict[str, float]:
    """Metrics of one fused output against its ground truth."""
    out = {
        "psnr": psnr(fused, gt),
        "ssim": ssim(fused, gt),
        "nmi": nmi_metric(fused, gt),
        "entropy": entropy_metric(fused),
        "rmse": rmse(fused, gt),
    }
    if task == "hdr":
        out["psnr_linear"] = out["psnr"]
        out["psnr_mu"] = psnr_mu(fused, gt, mu)
    return out


@dataclass
class MetricReport:
    samples: list[dict] = field(default_factory=list)  # {"id": ..., metric: value}

    def add(self, sample_id: str, values: dict[str, float]) -> None:
        self.samples.append({"id": sample_id, **values})

    @property
    def aggregate(self) -> dict[str, float]:
        keys = [k for k in METRIC_NAMES if any(k in s for s in self.samples)]
        return {k: float(np.mean([s[k] for s in self.samples if k in s])) for k in keys}

    def to_jsonl(self) -> str:
        lines = [json.dumps(s, sort_keys=True) for s in self.samples]
        lines.append(json.dumps({"id": "__aggregate__", **self.aggregate}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        keys = [k for k in METRIC_NAMES if any(k in s for s in self.samples)]
        rows = [["id", *keys]]
        for s in self.samples:
            rows.append([s["id"], *(f"{s[k]:.4f}" if k in s else "-" for k in keys)])
        agg = self.aggregate
        rows.append(["mean", *(f"{agg[k]:.4f}" for k in keys)])
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows) + "\n"
