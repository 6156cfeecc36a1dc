"""Radiomic feature bank, ROI protocol, and reproducibility metrics.

The bank is 90 features: 18 first-order intensity statistics plus 9 GLCM
texture features computed for 8 co-occurrence configurations (distances
1 and 2 crossed with offsets (0,1), (1,0), (1,1), (1,-1)).  Feature order
and names are fixed so vectors from different images align.

Degenerate-statistics policy (kept so vectors stay finite and comparable):
skewness/kurtosis are 0 when the ROI is constant, GLCM correlation is 0
when a marginal is constant, and the concordance correlation of two
identical constant sequences is 1.

GLCM quantization uses 32 uniform levels over the *configured* HU range,
not per-image min/max, so a global intensity shift moves bin occupancy
instead of being silently renormalized away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .phantom import CtImage, DEFAULT_HU_MIN, DEFAULT_HU_MAX, ROI_RANGES

GLCM_LEVELS = 32
GLCM_DISTANCES = (1, 2)
GLCM_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))
ENTROPY_BINS = 256
MIN_MASK_PIXELS = 16
CCC_REPRODUCIBLE = 0.85
PSNR_DEFAULT_PEAK = 2024.0
SSIM_DYNAMIC_RANGE = 2024.0

FIRST_ORDER_NAMES = (
    "fo_mean", "fo_variance", "fo_std", "fo_skewness", "fo_kurtosis",
    "fo_min", "fo_max", "fo_range", "fo_median", "fo_p10", "fo_p90",
    "fo_iqr", "fo_energy", "fo_rms", "fo_entropy", "fo_uniformity",
    "fo_mean_abs_dev", "fo_robust_mad",
)

GLCM_STAT_NAMES = (
    "contrast", "dissimilarity", "homogeneity", "energy", "entropy",
    "correlation", "cluster_shade", "cluster_prominence", "max_probability",
)


def _offset_label(dr: int, dc: int) -> str:
    def part(v):
        return f"m{-v}" if v < 0 else str(v)
    return f"{part(dr)}{part(dc)}"


def _glcm_config_names():
    names = []
    for d in GLCM_DISTANCES:
        for dr, dc in GLCM_OFFSETS:
            for stat in GLCM_STAT_NAMES:
                names.append(f"glcm_d{d}_o{_offset_label(dr, dc)}_{stat}")
    return tuple(names)


FEATURE_NAMES: tuple[str, ...] = FIRST_ORDER_NAMES + _glcm_config_names()
FEATURE_COUNT = len(FEATURE_NAMES)   # 18 + 9*8 = 90


class FeatureError(ValueError):
    """Unsatisfiable feature extraction request."""


class MetricError(ValueError):
    """Invalid metric operands."""


@dataclass
class RoiMask:
    mask: np.ndarray            # bool, image-shaped
    hu_range: tuple[int, int]
    source_phantom_id: int

    @property
    def pixel_count(self) -> int:
        return int(self.mask.sum())

    @property
    def empty(self) -> bool:
        return self.pixel_count == 0


@dataclass
class FeatureVector:
    names: tuple[str, ...]
    values: np.ndarray          # float64, aligned with names

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])


def roi_mask(standard: CtImage, hu_range: tuple[int, int]) -> RoiMask:
    """Mask of standard-image pixels inside [lo, hi].

    The mask derives from the standard image and is applied to both images
    of a pair, so paired features are computed over identical pixel sets.
    """
    lo, hi = hu_range
    if lo >= hi:
        raise MetricError(f"ROI range must have lo < hi, got [{lo}, {hi}]")
    m = (standard.pixels >= lo) & (standard.pixels <= hi)
    return RoiMask(mask=m, hu_range=(lo, hi), source_phantom_id=standard.phantom_id)


# ---------------------------------------------------------------------------
# first-order statistics
# ---------------------------------------------------------------------------

def _first_order(values: np.ndarray, hu_min: int, hu_max: int) -> list[float]:
    v = values.astype(np.float64)
    n = v.size
    mean = v.mean()
    var = v.var()                # biased, 1/n
    std = math.sqrt(var)
    centered = v - mean
    if std > 0:
        skew = float((centered ** 3).mean() / std ** 3)
        kurt = float((centered ** 4).mean() / std ** 4 - 3.0)
    else:
        skew = 0.0
        kurt = 0.0
    vmin, vmax = float(v.min()), float(v.max())
    median = float(np.percentile(v, 50))
    p10 = float(np.percentile(v, 10))
    p90 = float(np.percentile(v, 90))
    iqr = float(np.percentile(v, 75) - np.percentile(v, 25))
    energy = float((v * v).sum())
    rms = math.sqrt(energy / n)
    # histogram entropy/uniformity over fixed uniform bins spanning the HU range
    span = hu_max - hu_min
    idx = np.clip(((v - hu_min) * ENTROPY_BINS / span).astype(np.int64), 0, ENTROPY_BINS - 1)
    counts = np.bincount(idx, minlength=ENTROPY_BINS)
    p = counts[counts > 0] / n
    entropy = float(-(p * np.log2(p)).sum())
    uniformity = float((p * p).sum())
    mean_abs_dev = float(np.abs(centered).mean())
    robust_mad = float(np.median(np.abs(v - median)))
    return [mean, var, std, skew, kurt, vmin, vmax, vmax - vmin, median, p10, p90,
            iqr, energy, rms, entropy, uniformity, mean_abs_dev, robust_mad]


# ---------------------------------------------------------------------------
# GLCM texture
# ---------------------------------------------------------------------------

def quantize(pixels: np.ndarray, hu_min: int, hu_max: int) -> np.ndarray:
    """Map HU to GLCM_LEVELS uniform levels over [hu_min, hu_max]."""
    span = hu_max - hu_min
    q = ((pixels.astype(np.float64) - hu_min) * GLCM_LEVELS / span).astype(np.int64)
    return np.clip(q, 0, GLCM_LEVELS - 1)


def glcm_matrix(quantized: np.ndarray, mask: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Normalized symmetric co-occurrence matrix for one offset.

    Counts every ordered pair (p, p+offset) with both pixels in the mask,
    in both directions.  Returns the all-zero matrix when no pair exists.
    """
    h, w = quantized.shape
    r0, r1 = max(0, -dr), min(h, h - dr)
    c0, c1 = max(0, -dc), min(w, w - dc)
    if r0 >= r1 or c0 >= c1:
        return np.zeros((GLCM_LEVELS, GLCM_LEVELS), dtype=np.float64)
    a = quantized[r0:r1, c0:c1]
    b = quantized[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
    m = mask[r0:r1, c0:c1] & mask[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
    if not m.any():
        return np.zeros((GLCM_LEVELS, GLCM_LEVELS), dtype=np.float64)
    flat = a[m] * GLCM_LEVELS + b[m]
    counts = np.bincount(flat, minlength=GLCM_LEVELS * GLCM_LEVELS).astype(np.float64)
    mat = counts.reshape(GLCM_LEVELS, GLCM_LEVELS)
    mat = mat + mat.T
    return mat / mat.sum()


_I_GRID, _J_GRID = np.meshgrid(np.arange(GLCM_LEVELS, dtype=np.float64),
                               np.arange(GLCM_LEVELS, dtype=np.float64), indexing="ij")


def _glcm_stats(p: np.ndarray) -> list[float]:
    total = p.sum()
    if total == 0.0:
        return [0.0] * len(GLCM_STAT_NAMES)
    i, j = _I_GRID, _J_GRID
    diff = i - j
    contrast = float((p * diff * diff).sum())
    dissimilarity = float((p * np.abs(diff)).sum())
    homogeneity = float((p / (1.0 + diff * diff)).sum())
    asm = float((p * p).sum())
    nz = p[p > 0]
    entropy = float(-(nz * np.log2(nz)).sum())
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    lv = np.arange(GLCM_LEVELS, dtype=np.float64)
    mu_x = float((px * lv).sum())
    mu_y = float((py * lv).sum())
    sd_x = math.sqrt(float((px * (lv - mu_x) ** 2).sum()))
    sd_y = math.sqrt(float((py * (lv - mu_y) ** 2).sum()))
    if sd_x > 0 and sd_y > 0:
        correlation = float((p * (i - mu_x) * (j - mu_y)).sum() / (sd_x * sd_y))
    else:
        correlation = 0.0
    spread = i + j - mu_x - mu_y
    shade = float((p * spread ** 3).sum())
    prominence = float((p * spread ** 4).sum())
    max_prob = float(p.max())
    return [contrast, dissimilarity, homogeneity, asm, entropy, correlation,
            shade, prominence, max_prob]


def extract_features(img: CtImage, mask: RoiMask | None = None,
                     hu_min: int = DEFAULT_HU_MIN, hu_max: int = DEFAULT_HU_MAX) -> FeatureVector:
    """Full 90-feature vector for one image (optionally restricted to a mask)."""
    if mask is None:
        m = np.ones((img.height, img.width), dtype=bool)
    else:
        if mask.mask.shape != (img.height, img.width):
            raise FeatureError(f"mask shape {mask.mask.shape} does not match image "
                               f"{img.height}x{img.width}")
        m = mask.mask
    n = int(m.sum())
    if n < MIN_MASK_PIXELS:
        raise FeatureError(f"feature extraction needs >= {MIN_MASK_PIXELS} masked pixels, "
                           f"got {n}")
    values = _first_order(img.pixels[m], hu_min, hu_max)
    q = quantize(img.pixels, hu_min, hu_max)
    for d in GLCM_DISTANCES:
        for dr, dc in GLCM_OFFSETS:
            mat = glcm_matrix(q, m, d * dr, d * dc)
            values.extend(_glcm_stats(mat))
    return FeatureVector(names=FEATURE_NAMES, values=np.asarray(values, dtype=np.float64))


# ---------------------------------------------------------------------------
# agreement / quality metrics
# ---------------------------------------------------------------------------

def ccc(xs, ys) -> float:
    """Concordance correlation: 2*cov / (var_x + var_y + mean_gap^2).

    Biased (1/n) moments.  Two identical constant sequences agree
    perfectly, so a zero denominator with zero covariance returns 1.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError(f"ccc needs two equal-length 1D sequences, got "
                          f"{x.shape} and {y.shape}")
    if x.size < 2:
        raise MetricError("ccc needs at least 2 observations")
    mx, my = x.mean(), y.mean()
    cov = ((x - mx) * (y - my)).mean()
    denom = x.var() + y.var() + (mx - my) ** 2
    if denom == 0.0:
        return 1.0
    return float(2.0 * cov / denom)


def psnr(a: CtImage, b: CtImage, peak: float = PSNR_DEFAULT_PEAK) -> float:
    """10*log10(peak^2 / MSE) in dB; +inf when the images are identical."""
    if (a.width, a.height) != (b.width, b.height):
        raise MetricError(f"psnr dims mismatch: {a.width}x{a.height} vs {b.width}x{b.height}")
    diff = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
    mse = float((diff * diff).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


def _ssim_kernel() -> np.ndarray:
    half = _SSIM_WINDOW // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(xs * xs) / (2.0 * _SSIM_SIGMA ** 2))
    k = np.outer(g, g)
    return k / k.sum()


_SSIM_K = _ssim_kernel()


def _windowed(img: np.ndarray) -> np.ndarray:
    wins = np.lib.stride_tricks.sliding_window_view(img, (_SSIM_WINDOW, _SSIM_WINDOW))
    return np.einsum("ijkl,kl->ij", wins, _SSIM_K)


def ssim(a: CtImage, b: CtImage) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), L = 2024."""
    if (a.width, a.height) != (b.width, b.height):
        raise MetricError(f"ssim dims mismatch: {a.width}x{a.height} vs {b.width}x{b.height}")
    if a.width < _SSIM_WINDOW or a.height < _SSIM_WINDOW:
        raise MetricError(f"ssim needs images >= {_SSIM_WINDOW}x{_SSIM_WINDOW}")
    x = a.pixels.astype(np.float64)
    y = b.pixels.astype(np.float64)
    c1 = (0.01 * SSIM_DYNAMIC_RANGE) ** 2
    c2 = (0.03 * SSIM_DYNAMIC_RANGE) ** 2
    mu_x = _windowed(x)
    mu_y = _windowed(y)
    var_x = _windowed(x * x) - mu_x * mu_x
    var_y = _windowed(y * y) - mu_y * mu_y
    cov = _windowed(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


# ---------------------------------------------------------------------------
# reproducibility report
# ---------------------------------------------------------------------------

@dataclass
class ReproReport:
    """Per-(ROI range, feature) CCC plus image-quality summaries.

    `ccc_by_range[range]` is None when the range had fewer than two pairs
    with a usable mask (an absent cell, not a zero).
    """

    roi_ranges: tuple[tuple[int, int], ...]
    ccc_by_range: dict[tuple[int, int], dict[str, float] | None]
    reproducible_counts: dict[tuple[int, int], int | None]
    mean_psnr: float
    sd_psnr: float
    mean_ssim: float
    sd_ssim: float
    n_pairs: int


class ReportError(ValueError):
    pass


def reproducibility_report(pairs: list[tuple[CtImage, CtImage]],
                           roi_ranges: tuple = ROI_RANGES,
                           hu_min: int = DEFAULT_HU_MIN,
                           hu_max: int = DEFAULT_HU_MAX) -> ReproReport:
    """Agreement of candidate features with standard features across pairs.

    For each ROI range and feature, the feature value is collected across
    all candidates and all standards, and their concordance is computed
    over the image sample.  A feature is counted reproducible when its
    CCC exceeds 0.85.  PSNR/SSIM are whole-image, mean +/- SD over pairs.
    """
    if not pairs:
        raise ReportError("empty pair list")
    if len(pairs) < 10:
        raise ReportError(f"reproducibility needs >= 10 pairs, got {len(pairs)}")

    psnrs = [psnr(cand, std) for cand, std in pairs]
    ssims = [ssim(cand, std) for cand, std in pairs]

    ccc_by_range: dict[tuple[int, int], dict[str, float] | None] = {}
    counts: dict[tuple[int, int], int | None] = {}
    for rng in roi_ranges:
        cand_rows, std_rows = [], []
        for cand, std in pairs:
            m = roi_mask(std, rng)
            if m.pixel_count < MIN_MASK_PIXELS:
                continue
            cand_rows.append(extract_features(cand, m, hu_min, hu_max).values)
            std_rows.append(extract_features(std, m, hu_min, hu_max).values)
        if len(cand_rows) < 2:
            ccc_by_range[rng] = None
            counts[rng] = None
            continue
        cand_mat = np.stack(cand_rows)      # (pairs, features)
        std_mat = np.stack(std_rows)
        per_feature = {}
        n_repro = 0
        for fi, name in enumerate(FEATURE_NAMES):
            c = ccc(cand_mat[:, fi], std_mat[:, fi])
            per_feature[name] = c
            if c > CCC_REPRODUCIBLE:
                n_repro += 1
        ccc_by_range[rng] = per_feature
        counts[rng] = n_repro

    def _mean_sd(vals):
        arr = np.asarray(vals, dtype=np.float64)
        mean = float(arr.mean())
        finite = arr[np.isfinite(arr)]
        # infinite PSNR (identical images) dominates the mean; spread is
        # reported over the finite entries only
        sd = float(finite.std(ddof=1)) if finite.size >= 2 else 0.0
        return mean, sd

    mean_psnr, sd_psnr = _mean_sd(psnrs)
    mean_ssim, sd_ssim = _mean_sd(ssims)
    return ReproReport(
        roi_ranges=tuple(roi_ranges),
        ccc_by_range=ccc_by_range,
        reproducible_counts=counts,
        mean_psnr=mean_psnr,
        sd_psnr=sd_psnr,
        mean_ssim=mean_ssim,
        sd_ssim=sd_ssim,
        n_pairs=len(pairs),
    )


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def report_rows(report: ReproReport) -> tuple[list[list[str]], list[list[str]]]:
    """CSV rows: per-feature CCC block and per-range summary block."""
    feature_rows = []
    for rng in report.roi_ranges:
        per_feature = report.ccc_by_range.get(rng)
        if per_feature is None:
            continue
        for name in FEATURE_NAMES:
            feature_rows.append([str(rng[0]), str(rng[1]), name, _fmt(per_feature[name])])
    summary_rows = []
    for rng in report.roi_ranges:
        count = report.reproducible_counts.get(rng)
        if count is None:
            continue
        summary_rows.append([f"[{rng[0]}..{rng[1]}]", str(count),
                             _fmt(report.mean_psnr), _fmt(report.sd_psnr),
                             _fmt(report.mean_ssim), _fmt(report.sd_ssim)])
    return feature_rows, summary_rows


def write_report_csv(report: ReproReport, path: str) -> None:
    feature_rows, summary_rows = report_rows(report)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("roi_lo,roi_hi,feature_name,ccc\n")
        for row in feature_rows:
            fh.write(",".join(row) + "\n")
        fh.write("range,reproducible_count,mean_psnr,sd_psnr,mean_ssim,sd_ssim\n")
        for row in summary_rows:
            fh.write(",".join(row) + "\n")
