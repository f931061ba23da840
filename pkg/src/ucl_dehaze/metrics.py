"""Full- and reduced-reference dehazing quality metrics.

All functions take ``H x W x 3`` (or ``H x W``) float arrays in [0, 1]
unless stated otherwise. Grayscale conversion uses BT.601 luma weights.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage

from .errors import DimensionError

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window
CONTRAST_RADIUS = 3
MEAN_FLOOR = 1e-6
EDGE_THRESHOLD = 0.05
EDGE_RADIUS = 2  # 5x5 window

METRIC_NAMES = ("psnr", "ssim", "ciede2000", "contrast_gain", "e", "r_bar", "sigma")

_LUMA = np.array([0.299, 0.587, 0.114])
# sRGB (D65) -> XYZ
_RGB_TO_XYZ = np.array([[0.412453, 0.357580, 0.180423],
                        [0.212671, 0.715160, 0.072169],
                        [0.019334, 0.119193, 0.950227]])
# white point as the image of RGB (1, 1, 1), so white maps exactly to a = b = 0
_D65_WHITE = _RGB_TO_XYZ.sum(axis=1)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ _LUMA
    raise DimensionError(f"expected H x W or H x W x 3, got {img.shape}")


# --------------------------------------------------------------------------
# full reference


def psnr(a, b, peak: float = 1.0, cap: Optional[float] = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``cap`` (``inf`` if ``cap`` is None)."""
    a, b = _pair(a, b)
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = np.mean((a - b) ** 2)
    value = math.inf if mse == 0 else 10.0 * math.log10(peak ** 2 / mse)
    return value if cap is None else min(value, cap)


def gaussian_window(radius: int = SSIM_RADIUS, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _valid_filter(img, kernel_1d):
    out = ndimage.correlate1d(img, kernel_1d, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, kernel_1d, axis=1, mode="reflect")
    r = len(kernel_1d) // 2
    return out[r:-r, r:-r]


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian (sigma 1.5) windows of the luma."""
    a, b = _pair(a, b)
    a, b = to_gray(a), to_gray(b)
    size = 2 * SSIM_RADIUS + 1
    if min(a.shape) < size:
        raise DimensionError(f"image {a.shape} is smaller than the {size}x{size} SSIM window")
    g = gaussian_window()
    mu_a, mu_b = _valid_filter(a, g), _valid_filter(b, g)
    var_a = _valid_filter(a * a, g) - mu_a * mu_a
    var_b = _valid_filter(b * b, g) - mu_b * mu_b
    cov = _valid_filter(a * b, g) - mu_a * mu_b
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def rgb_to_lab(img) -> np.ndarray:
    """sRGB in [0, 1] to CIELAB under D65."""
    img = np.asarray(img, dtype=np.float64)
    lin = np.where(img <= 0.04045, img / 12.92, ((img + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB_TO_XYZ.T / _D65_WHITE
    eps = (6 / 29) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6 / 29) ** 2) + 4 / 29)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def delta_e_ciede2000(lab1, lab2) -> np.ndarray:
    """CIEDE2000 colour difference between Lab arrays ``(..., 3)`` (kL = kC = kH = 1)."""
    lab1, lab2 = _pair(lab1, lab2)
    L1, a1, b1 = np.moveaxis(lab1, -1, 0)
    L2, a2, b2 = np.moveaxis(lab2, -1, 0)

    c_bar7 = ((np.hypot(a1, b1) + np.hypot(a2, b2)) / 2) ** 7
    g = 0.5 * (1 - np.sqrt(c_bar7 / (c_bar7 + 25.0 ** 7)))
    a1p, a2p = (1 + g) * a1, (1 + g) * a2
    c1p, c2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360

    cprod = c1p * c2p
    dhp = h2p - h1p
    dhp = np.where(dhp > 180, dhp - 360, np.where(dhp < -180, dhp + 360, dhp))
    dhp = np.where(cprod == 0, 0.0, dhp)
    dL = L2 - L1
    dC = c2p - c1p
    dH = 2 * np.sqrt(cprod) * np.sin(np.radians(dhp) / 2)

    L_bar = (L1 + L2) / 2
    C_bar = (c1p + c2p) / 2
    hsum = h1p + h2p
    h_bar = np.where(np.abs(h1p - h2p) <= 180, hsum / 2,
                     np.where(hsum < 360, (hsum + 360) / 2, (hsum - 360) / 2))
    h_bar = np.where(cprod == 0, hsum, h_bar)

    t = (1 - 0.17 * np.cos(np.radians(h_bar - 30)) + 0.24 * np.cos(np.radians(2 * h_bar))
         + 0.32 * np.cos(np.radians(3 * h_bar + 6)) - 0.20 * np.cos(np.radians(4 * h_bar - 63)))
    d_theta = 30 * np.exp(-(((h_bar - 275) / 25) ** 2))
    C_bar7 = C_bar ** 7
    r_c = 2 * np.sqrt(C_bar7 / (C_bar7 + 25.0 ** 7))
    s_l = 1 + 0.015 * (L_bar - 50) ** 2 / np.sqrt(20 + (L_bar - 50) ** 2)
    s_c = 1 + 0.045 * C_bar
    s_h = 1 + 0.015 * C_bar * t
    r_t = -np.sin(np.radians(2 * d_theta)) * r_c

    tl, tc, th = dL / s_l, dC / s_c, dH / s_h
    return np.sqrt(tl ** 2 + tc ** 2 + th ** 2 + r_t * tc * th)


def ciede2000(a, b) -> float:
    """Mean per-pixel CIEDE2000 difference of two sRGB images."""
    a, b = _pair(a, b)
    if a.ndim != 3 or a.shape[2] != 3:
        raise DimensionError(f"expected H x W x 3 images, got {a.shape}")
    return float(np.mean(delta_e_ciede2000(rgb_to_lab(a), rgb_to_lab(b))))


# --------------------------------------------------------------------------
# reduced reference


def mean_contrast(img, r: int = CONTRAST_RADIUS, mean_floor: float = MEAN_FLOOR) -> float:
    """Mean over all fully-contained ``(2r+1)^2`` windows of local variance / local mean."""
    gray = to_gray(img)
    size = 2 * r + 1
    if r < 1:
        raise ValueError("window radius must be >= 1")
    if min(gray.shape) < size:
        raise DimensionError(f"image {gray.shape} is smaller than the {size}x{size} contrast window")
    m = ndimage.uniform_filter(gray, size, mode="reflect")[r:-r, r:-r]
    sq = ndimage.uniform_filter(gray * gray, size, mode="reflect")[r:-r, r:-r]
    s = np.maximum(sq - m * m, 0.0)
    return float(np.mean(s / np.maximum(m, mean_floor)))


def contrast_gain(restored, hazy, r: int = CONTRAST_RADIUS, mean_floor: float = MEAN_FLOOR) -> float:
    restored, hazy = _pair(restored, hazy)
    return mean_contrast(restored, r, mean_floor) - mean_contrast(hazy, r, mean_floor)


def gradient_magnitude(gray) -> np.ndarray:
    """Central-difference gradient magnitude; zero on the one-pixel border."""
    gray = np.asarray(gray, dtype=np.float64)
    out = np.zeros_like(gray)
    gx = (gray[1:-1, 2:] - gray[1:-1, :-2]) / 2
    gy = (gray[2:, 1:-1] - gray[:-2, 1:-1]) / 2
    out[1:-1, 1:-1] = np.hypot(gx, gy)
    return out


def visible_edge_mask(gray, threshold: float = EDGE_THRESHOLD, radius: int = EDGE_RADIUS) -> np.ndarray:
    """Pixels whose Michelson contrast ``(max-min)/(max+min)`` over a local window exceeds ``threshold``.

    Only pixels whose window lies fully inside the image are considered.
    """
    gray = np.asarray(gray, dtype=np.float64)
    size = 2 * radius + 1
    mask = np.zeros(gray.shape, dtype=bool)
    if min(gray.shape) < size:
        return mask
    hi = ndimage.maximum_filter(gray, size, mode="nearest")
    lo = ndimage.minimum_filter(gray, size, mode="nearest")
    s = hi + lo
    contrast = np.divide(hi - lo, s, out=np.zeros_like(s), where=s > 0)
    inner = (slice(radius, -radius), slice(radius, -radius))
    mask[inner] = contrast[inner] > threshold
    return mask


def saturated(img, peak: float = 1.0) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return (img <= 0) | (img >= peak)
    return ((img <= 0) | (img >= peak)).any(axis=-1)


@dataclass
class EdgeMetrics:
    e: Optional[float]
    r_bar: Optional[float]
    sigma: float
    n_r: int
    n_o: int
    n_excluded: int


def visible_edge_metrics(restored, hazy, threshold: float = EDGE_THRESHOLD,
                         peak: float = 1.0) -> EdgeMetrics:
    """New-visible-edge rate ``e``, mean gradient ratio ``r_bar`` and saturation rate ``sigma``.

    ``e`` is None when the hazy image has no visible edge; ``r_bar`` is None
    when no visible edge of the restored image has a usable gradient ratio.
    Edge pixels with a zero gradient in either image are left out of
    ``r_bar`` and counted in ``n_excluded``.
    """
    restored, hazy = _pair(restored, hazy)
    gr, gh = to_gray(restored), to_gray(hazy)
    edges_r = visible_edge_mask(gr, threshold)
    edges_o = visible_edge_mask(gh, threshold)
    n_r, n_o = int(edges_r.sum()), int(edges_o.sum())
    e = (n_r - n_o) / n_o if n_o > 0 else None

    grad_r, grad_h = gradient_magnitude(gr), gradient_magnitude(gh)
    usable = edges_r & (grad_r > 0) & (grad_h > 0)
    n_excluded = int(edges_r.sum() - usable.sum())
    if usable.any():
        r_bar = float(np.exp(np.mean(np.log(grad_r[usable] / grad_h[usable]))))
    else:
        r_bar = None
    if n_excluded:
        logger.debug("%d visible-edge pixels excluded from r_bar", n_excluded)

    new_sat = saturated(restored, peak) & ~saturated(hazy, peak)
    sigma = float(new_sat.sum()) / (gr.shape[0] * gr.shape[1])
    return EdgeMetrics(e, r_bar, sigma, n_r, n_o, n_excluded)


# --------------------------------------------------------------------------
# batch evaluation


@dataclass
class MetricReport:
    rows: List[Dict[str, object]] = field(default_factory=list)
    means: Dict[str, Optional[float]] = field(default_factory=dict)
    skipped: Dict[str, int] = field(default_factory=dict)
    metadata: Dict[str, object] = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def evaluate_pair(restored, reference=None, hazy=None, contrast_radius: int = CONTRAST_RADIUS,
                  edge_threshold: float = EDGE_THRESHOLD) -> Dict[str, Optional[float]]:
    """All applicable metrics for one restored image (values None when not applicable)."""
    out: Dict[str, Optional[float]] = dict.fromkeys(METRIC_NAMES)
    if reference is not None:
        out["psnr"] = psnr(restored, reference)
        out["ssim"] = ssim(restored, reference)
        out["ciede2000"] = ciede2000(restored, reference)
    if hazy is not None:
        out["contrast_gain"] = contrast_gain(restored, hazy, contrast_radius)
        em = visible_edge_metrics(restored, hazy, edge_threshold)
        out["e"], out["r_bar"], out["sigma"] = em.e, em.r_bar, em.sigma
    return out


def _index(directory) -> Dict[str, Path]:
    from .data import IMAGE_EXTENSIONS
    if directory is None:
        return {}
    return {p.stem: p for p in sorted(Path(directory).iterdir())
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS}


def summarize(rows: List[Dict[str, object]]) -> Dict[str, Optional[float]]:
    """Arithmetic means over rows where each metric is defined (sorted, compensated summation)."""
    means = {}
    for name in METRIC_NAMES:
        vals = sorted(float(r[name]) for r in rows if r.get(name) is not None)
        means[name] = math.fsum(vals) / len(vals) if vals else None
    return means


def evaluate_dirs(restored_dir, reference_dir=None, hazy_dir=None, workers: int = 1,
                  contrast_radius: int = CONTRAST_RADIUS,
                  edge_threshold: float = EDGE_THRESHOLD) -> MetricReport:
    """Match images by file stem and evaluate each restored image.

    Rows whose counterpart is missing or unreadable get ``status`` set to a
    reason and are excluded from the means.
    """
    from .data import load_image

    restored = _index(restored_dir)
    refs, hazies = _index(reference_dir), _index(hazy_dir)

    def one(stem):
        row: Dict[str, object] = {"name": restored[stem].name, "status": "ok"}
        row.update(dict.fromkeys(METRIC_NAMES))
        missing = []
        if reference_dir is not None and stem not in refs:
            missing.append("reference")
        if hazy_dir is not None and stem not in hazies:
            missing.append("hazy")
        if missing:
            row["status"] = "skipped: missing " + ", ".join(missing)
            return row
        try:
            img = load_image(restored[stem])
            ref = load_image(refs[stem]) if reference_dir is not None else None
            hz = load_image(hazies[stem]) if hazy_dir is not None else None
            row.update(evaluate_pair(img, ref, hz, contrast_radius, edge_threshold))
        except Exception as exc:  # noqa: BLE001 - recorded per row
            row["status"] = f"skipped: {exc}"
        return row

    stems = sorted(restored)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, stems))
    else:
        rows = [one(s) for s in stems]
    ok = [r for r in rows if r["status"] == "ok"]
    skipped = {"images": len(rows) - len(ok)}
    for name in METRIC_NAMES:
        skipped[name] = sum(1 for r in ok if r[name] is None)
    meta = {"psnr_cap_db": PSNR_CAP, "contrast_radius": contrast_radius,
            "edge_threshold": edge_threshold, "edge_window": 2 * EDGE_RADIUS + 1,
            "restored_dir": str(restored_dir), "reference_dir": str(reference_dir) if reference_dir else None,
            "hazy_dir": str(hazy_dir) if hazy_dir else None}
    return MetricReport(rows, summarize(ok), skipped, meta)


def write_report(report: MetricReport, csv_path=None, json_path=None):
    """CSV with one row per image plus a ``MEAN`` summary row, and/or the full JSON report."""
    if csv_path is not None:
        cols = ["name", "status", *METRIC_NAMES]
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in report.rows:
                w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                            for c in cols])
            w.writerow(["MEAN", "summary", *["" if report.means.get(m) is None else repr(report.means[m])
                                             for m in METRIC_NAMES]])
    if json_path is not None:
        Path(json_path).write_text(json.dumps(report.to_dict(), indent=2))
