"""Image-similarity metrics and spatial attenuation analyses.

Similarity metrics (psnr/ssim/ncc/mae/rmse) operate on windowed unit-interval
images; attenuation analyses (line profiles, ROI means, histograms) operate on
raw HU slices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import NumericalError, ShapeError

PSNR_IDENTICAL = math.inf

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

HISTOGRAM_BINS = 64
HISTOGRAM_RANGE_HU = (-150.0, 250.0)


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mae(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-interval images (MAX = 1).
    Returns +inf for identical images."""
    r = rmse(a, b)
    if r == 0.0:
        return PSNR_IDENTICAL
    return float(-20.0 * math.log10(r))


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized cross-correlation (Pearson r of the flattened images)."""
    a, b = _check_pair(a, b)
    da = a.ravel() - a.mean()
    db = b.ravel() - b.mean()
    na = np.linalg.norm(da)
    nb = np.linalg.norm(db)
    if na == 0.0 or nb == 0.0:
        raise NumericalError("correlation undefined for constant input")
    return float(np.dot(da, db) / (na * nb))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local structural similarity with an 11x11 Gaussian window
    (sigma 1.5) and stabilizers C1=(0.01)^2, C2=(0.03)^2 for unit range."""
    a, b = _check_pair(a, b)
    if a.ndim != 2:
        raise ShapeError(f"ssim expects 2D images, got {a.ndim}D")
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    kernel = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)

    def filt(x):
        return ndimage.convolve(x, kernel, mode="nearest")

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    psnr_db: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    ncc: list[float] = field(default_factory=list)
    mae: list[float] = field(default_factory=list)
    rmse: list[float] = field(default_factory=list)

    @property
    def image_count(self) -> int:
        return len(self.rmse)

    @property
    def psnr_excluded_count(self) -> int:
        return sum(1 for v in self.psnr_db if math.isinf(v))

    def add_pair(self, a: np.ndarray, b: np.ndarray) -> None:
        self.psnr_db.append(psnr(a, b))
        self.ssim.append(ssim(a, b))
        self.ncc.append(ncc(a, b))
        self.mae.append(mae(a, b))
        self.rmse.append(rmse(a, b))

    def summary(self) -> dict:
        """Mean and population SD per metric; infinite PSNR values (identical
        image pairs) are excluded and reported as a count."""
        finite_psnr = [v for v in self.psnr_db if not math.isinf(v)]
        out = {"image_count": self.image_count,
               "psnr_excluded_count": self.psnr_excluded_count}
        for name, values in [
            ("psnr_db", finite_psnr),
            ("ssim", self.ssim),
            ("ncc", self.ncc),
            ("mae", self.mae),
            ("rmse", self.rmse),
        ]:
            if values:
                arr = np.asarray(values)
                out[name] = {"mean": float(arr.mean()),
                             "sd": float(arr.std())}
            else:
                out[name] = {"mean": None, "sd": None}
        return out

    def to_json(self) -> str:
        def enc(v):
            return "inf" if math.isinf(v) else v

        return json.dumps(
            {
                "per_image": {
                    "psnr_db": [enc(v) for v in self.psnr_db],
                    "ssim": self.ssim,
                    "ncc": self.ncc,
                    "mae": self.mae,
                    "rmse": self.rmse,
                },
                "summary": self.summary(),
            },
            indent=2,
        )


@dataclass(frozen=True)
class LineProfile:
    start: tuple[float, float]
    end: tuple[float, float]
    values_hu: np.ndarray  # evenly spaced samples, endpoints inclusive

    @property
    def sample_count(self) -> int:
        return len(self.values_hu)


def line_profile(img: np.ndarray, p0, p1, n: int) -> LineProfile:
    """Bilinearly sample attenuation along the segment p0->p1 (row, col pixel
    coordinates), n evenly spaced samples with both endpoints included."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"line_profile expects a 2D slice, got {img.ndim}D")
    if n < 2:
        raise ShapeError("need at least 2 samples")
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    for p in (p0, p1):
        if not (0 <= p[0] <= img.shape[0] - 1 and 0 <= p[1] <= img.shape[1] - 1):
            raise ShapeError(f"endpoint {tuple(p)} outside image {img.shape}")
    t = np.linspace(0.0, 1.0, n)
    coords = p0[:, None] * (1 - t) + p1[:, None] * t
    values = ndimage.map_coordinates(img, coords, order=1, mode="nearest")
    return LineProfile(tuple(p0), tuple(p1), values)


def roi_mean_hu(img: np.ndarray, mask: np.ndarray) -> float:
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if img.shape != mask.shape:
        raise ShapeError(f"shape mismatch: {img.shape} vs {mask.shape}")
    if not mask.any():
        raise NumericalError("empty ROI mask")
    return float(img[mask].mean())


def attenuation_histogram(values_hu: np.ndarray,
                          bins: int = HISTOGRAM_BINS,
                          range_hu=HISTOGRAM_RANGE_HU) -> np.ndarray:
    values_hu = np.asarray(values_hu, dtype=np.float64).ravel()
    if values_hu.size == 0:
        raise NumericalError("empty attenuation region")
    hist, _ = np.histogram(values_hu, bins=bins, range=range_hu, density=True)
    return hist


def attenuation_histogram_rmse(a: np.ndarray, b: np.ndarray,
                               bins: int = HISTOGRAM_BINS,
                               range_hu=HISTOGRAM_RANGE_HU) -> float:
    ha = attenuation_histogram(a, bins, range_hu)
    hb = attenuation_histogram(b, bins, range_hu)
    # Scale densities by bin width so bin masses (not per-HU densities) are
    # compared; disjoint-support 2-bin regions then give exactly 1.0.
    width = (range_hu[1] - range_hu[0]) / bins
    return float(np.sqrt(np.mean(((ha - hb) * width) ** 2)))


def attenuation_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of paired HU samples."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"paired samples differ in length: {a.size} vs {b.size}")
    return ncc(a, b)
