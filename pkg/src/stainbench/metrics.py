"""Fréchet distance, SSIM, PSNR, cycle consistency and seam discrepancy."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

REPORT_VERSION = 1
SSIM_WINDOW = 8
CSV_HEADER = ["version", "metric", "mean", "std", "count", "n_excluded", "extractor", "notes"]


# ---------------------------------------------------------------------------
# Fréchet distance
# ---------------------------------------------------------------------------


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix; negative eigenvalues (noise) are clipped to 0."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def gaussian_stats(feats) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError(f"need a (n >= 2, d) feature matrix, got shape {f.shape}")
    return f.mean(axis=0), np.atleast_2d(np.cov(f, rowvar=False))


def frechet_from_stats(mu1, sigma1, mu2, sigma2) -> float:
    s1_half = _psd_sqrt(sigma1)
    inner = s1_half @ sigma2 @ s1_half
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu1 - mu2
    fid = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr_cross)
    return max(fid, 0.0)


def frechet_distance(feats_a, feats_b) -> float:
    """Squared 2-Wasserstein distance between Gaussian fits of two feature sets (rows = samples)."""
    mu1, s1 = gaussian_stats(feats_a)
    mu2, s2 = gaussian_stats(feats_b)
    if mu1.shape != mu2.shape:
        raise ValueError(f"feature dims differ: {mu1.shape[0]} vs {mu2.shape[0]}")
    d = mu1.shape[0]
    n = min(len(np.atleast_1d(feats_a)), len(np.atleast_1d(feats_b)))
    if n <= d:
        warnings.warn(f"only {n} samples for {d}-dim features; covariance is rank deficient",
                      RuntimeWarning, stacklevel=2)
    return frechet_from_stats(mu1, s1, mu2, s2)


def _area_matrix(size: int, out: int) -> np.ndarray:
    """(out, size) weights averaging ``size`` pixels into ``out`` equal-area bins."""
    edges = np.arange(out + 1) * (size / out)
    lo, hi = edges[:-1, None], edges[1:, None]
    px = np.arange(size)[None, :]
    overlap = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def default_features(images, grid: int = 8) -> np.ndarray:
    """Area-average each (3, h, w) image down to grid x grid and flatten (d = 3 * grid**2)."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    ah = _area_matrix(imgs.shape[2], grid)
    aw = _area_matrix(imgs.shape[3], grid)
    small = np.einsum("ih,nchw,jw->ncij", ah, imgs, aw)
    return small.reshape(len(imgs), -1)


@dataclass(frozen=True)
class FeatureExtractor:
    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    dim: int

    def __call__(self, images) -> np.ndarray:
        feats = np.asarray(self.fn(images), dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.dim or not np.isfinite(feats).all():
            raise ValueError(f"extractor {self.name} returned invalid features {feats.shape}")
        return feats


DEFAULT_EXTRACTOR = FeatureExtractor("area8x8", default_features, 192)


def fid(images_a, images_b, extractor: FeatureExtractor = DEFAULT_EXTRACTOR) -> float:
    return frechet_distance(extractor(images_a), extractor(images_b))


# ---------------------------------------------------------------------------
# SSIM / PSNR
# ---------------------------------------------------------------------------


def _as_planes(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[0] not in (1, 3):
        raise ValueError(f"expected (h, w), (1, h, w) or (3, h, w), got {a.shape}")
    return a


def _box_mean(a: np.ndarray, k: int) -> np.ndarray:
    """Mean over every k x k window (valid positions only) of each plane."""
    s = np.pad(a, ((0, 0), (1, 0), (1, 0))).cumsum(axis=1).cumsum(axis=2)
    return (s[:, k:, k:] - s[:, :-k, k:] - s[:, k:, :-k] + s[:, :-k, :-k]) / (k * k)


def ssim_map(x, y, data_range: float = 1.0, window: int = SSIM_WINDOW) -> np.ndarray:
    x, y = _as_planes(x), _as_planes(y)
    if x.shape != y.shape:
        raise ValueError(f"SSIM needs equal shapes, got {x.shape} and {y.shape}")
    if min(x.shape[1:]) < window:
        raise ValueError(f"image {x.shape[1:]} smaller than the {window}x{window} window")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mx, my = _box_mean(x, window), _box_mean(y, window)
    vx = _box_mean(x * x, window) - mx * mx
    vy = _box_mean(y * y, window) - my * my
    cxy = _box_mean(x * y, window) - mx * my
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(x, y, data_range: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all 8x8 windows (stride 1), averaged across channels.

    Window statistics are uniform-weight population moments.
    """
    return float(ssim_map(x, y, data_range, window).mean())


def psnr(x, y, max_val: float = 1.0) -> float:
    """20 log10(max_val / sqrt(MSE)); returns +inf when the images are identical."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"PSNR needs equal shapes, got {x.shape} and {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(max_val / math.sqrt(mse))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    """A named metric over a set of images.

    Non-finite per-image values (identical-image PSNR) are kept in ``values``
    but excluded from ``mean``/``std``; ``n_excluded`` counts them.
    """

    metric: str
    values: list[float]
    provenance: dict = field(default_factory=dict)
    notes: str = ""

    @property
    def finite(self) -> list[float]:
        return [v for v in self.values if math.isfinite(v)]

    @property
    def count(self) -> int:
        return len(self.values)

    @property
    def n_excluded(self) -> int:
        return self.count - len(self.finite)

    @property
    def mean(self) -> float:
        f = self.finite
        if f:
            return float(np.mean(f))
        return math.inf if self.values else math.nan

    @property
    def std(self) -> float:
        f = self.finite
        return float(np.std(f)) if f else math.nan

    def to_dict(self) -> dict:
        def enc(v):
            return v if math.isfinite(v) else ("inf" if v > 0 else ("-inf" if v < 0 else "nan"))
        return {"version": REPORT_VERSION, "metric": self.metric, "mean": enc(self.mean),
                "std": enc(self.std), "count": self.count, "n_excluded": self.n_excluded,
                "values": [enc(v) for v in self.values], "provenance": self.provenance,
                "notes": self.notes}

    def csv_row(self) -> list:
        return [REPORT_VERSION, self.metric, repr(self.mean), repr(self.std), self.count,
                self.n_excluded, self.provenance.get("extractor", ""), self.notes]


def write_reports(reports: list[MetricReport], json_path, csv_path) -> None:
    with open(json_path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerow(r.csv_row())
    with open(csv_path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def scalar_report(metric: str, value: float, **provenance) -> MetricReport:
    return MetricReport(metric, [float(value)], provenance)


def paired_reports(xs, ys, max_val: float = 1.0, prefix: str = "", **provenance):
    """Per-image SSIM and PSNR between two aligned image lists."""
    if len(xs) != len(ys):
        raise ValueError(f"image counts differ: {len(xs)} vs {len(ys)}")
    s = [ssim(x, y, data_range=max_val) for x, y in zip(xs, ys)]
    p = [psnr(x, y, max_val) for x, y in zip(xs, ys)]
    prov = {"count": len(xs), "ssim_window": f"{SSIM_WINDOW}x{SSIM_WINDOW} uniform",
            "psnr_max_val": max_val, **provenance}
    return (MetricReport(prefix + "ssim", s, dict(prov)),
            MetricReport(prefix + "psnr", p, dict(prov),
                         notes=f"{sum(not math.isfinite(v) for v in p)} identical pairs excluded from mean"))


def _as_callable(model):
    from .layers import LayerStack
    from .models import infer
    if isinstance(model, LayerStack):
        return lambda x: infer(model, x)
    return model


def cycle_consistency(model_ab, model_ba, images_a, max_val: float = 1.0, **provenance):
    """SSIM and PSNR reports between each x and model_ba(model_ab(x))."""
    ab, ba = _as_callable(model_ab), _as_callable(model_ba)
    x = np.asarray(images_a)
    recon = np.asarray(ba(ab(x)))
    return paired_reports(x, recon, max_val, prefix="cycle_", **provenance)


# ---------------------------------------------------------------------------
# Seam discrepancy
# ---------------------------------------------------------------------------


def seam_terms(full, stitched, grid) -> dict:
    """Boundary and global discrepancy between whole-image and tiled inference.

    ``boundary`` is the mean, over every adjacent pixel pair straddling an
    interior ownership boundary of the grid, of the absolute difference
    between the stitched jump and the whole-image jump across that pair.
    ``global`` is the mean |full - stitched| over the image.
    """
    f = np.asarray(full, dtype=np.float64)
    s = np.asarray(stitched, dtype=np.float64)
    if f.shape != s.shape:
        raise ValueError(f"full {f.shape} and stitched {s.shape} differ in shape")
    if f.shape[-2:] != (grid.height, grid.width):
        raise ValueError(f"grid is {grid.height}x{grid.width} but images are {f.shape[-2:]}")
    d = s - f
    rows, cols = grid.seams()
    parts = [np.abs(d[..., b, :] - d[..., b - 1, :]).ravel() for b in rows]
    parts += [np.abs(d[..., :, b] - d[..., :, b - 1]).ravel() for b in cols]
    boundary = float(np.concatenate(parts).mean()) if parts else 0.0
    return {"boundary": boundary, "global": float(np.abs(d).mean())}


def seam_discrepancy(full, stitched, grid) -> float:
    t = seam_terms(full, stitched, grid)
    return t["boundary"] + t["global"]
