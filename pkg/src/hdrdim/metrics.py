"""PU encoding, PU-PSNR, PU-MS-SSIM and the power saving ratio."""
from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.integrate import cumulative_trapezoid

from .display import Backlight, _as_nits
from .hdrio import HdrImage, REC709

PSNR_CAP = 120.0
LUM_MIN, LUM_MAX = 1e-5, 1e8
ANCHOR_LOW = (0.1, 0.0)
ANCHOR_HIGH = (80.0, 255.0)

MS_SSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WIN, SSIM_SIGMA = 11, 1.5


@dataclass(frozen=True, eq=False)
class PuCurve:
    """Monotone luminance-to-code mapping, piecewise linear in log10 luminance."""

    log_lum: np.ndarray
    codes: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.log_lum, dtype=np.float64)
        y = np.asarray(self.codes, dtype=np.float64)
        if x.ndim != 1 or x.shape != y.shape or x.size < 2:
            raise ValueError("PU curve needs matching 1-D control point arrays")
        if np.any(np.diff(x) <= 0) or np.any(np.diff(y) <= 0):
            raise ValueError("PU control points must be strictly increasing")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "log_lum", x)
        object.__setattr__(self, "codes", y)

    @property
    def lum_range(self) -> tuple[float, float]:
        return 10.0 ** self.log_lum[0], 10.0 ** self.log_lum[-1]

    def encode(self, lum) -> np.ndarray:
        lum = np.asarray(lum, dtype=np.float64)
        lo, hi = self.lum_range
        return np.interp(np.log10(np.clip(lum, lo, hi)), self.log_lum, self.codes)

    def decode(self, code) -> np.ndarray:
        return 10.0 ** np.interp(code, self.codes, self.log_lum)

    def derivative(self, lum) -> np.ndarray:
        """d(code)/d(luminance); zero outside the curve's domain."""
        lum = np.asarray(lum, dtype=np.float64)
        lo, hi = self.lum_range
        inside = (lum > lo) & (lum < hi)
        x = np.log10(np.clip(lum, lo, hi))
        seg = np.clip(np.searchsorted(self.log_lum, x, side="right") - 1, 0, len(self.log_lum) - 2)
        slope = np.diff(self.codes)[seg] / np.diff(self.log_lum)[seg]
        return np.where(inside, slope / (np.clip(lum, lo, hi) * np.log(10.0)), 0.0)

    @classmethod
    def from_csv(cls, path) -> "PuCurve":
        """Load a two-column CSV of (luminance cd/m^2, code); a header row is optional."""
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.reader(fh):
                if not rec or rec[0].strip().startswith("#"):
                    continue
                try:
                    rows.append((float(rec[0]), float(rec[1])))
                except ValueError:
                    if rows:
                        raise
        arr = np.array(sorted(rows))
        if np.any(arr[:, 0] <= 0):
            raise ValueError("PU luminance control points must be positive")
        return cls(np.log10(arr[:, 0]), arr[:, 1])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["luminance", "code"])
            for x, y in zip(self.log_lum, self.codes):
                w.writerow([repr(float(10.0 ** x)), repr(float(y))])


def _csf_sensitivity(lum):
    # joint rod-cone contrast sensitivity used by the PU2 encoding
    p = (30.162, 4.0627, 1.6596, 0.2712)
    return p[0] * ((p[1] / lum) ** p[2] + 1.0) ** (-p[3])


@lru_cache(maxsize=1)
def default_curve() -> PuCurve:
    """PU curve from integrating the CSF-derived JND scale.

    Codes are rescaled so that 0.1 cd/m^2 maps to 0 and 80 cd/m^2 to 255.
    Control points every 0.05 decades over [1e-5, 1e8], plus both anchors.
    """
    fine = np.linspace(np.log10(LUM_MIN), np.log10(LUM_MAX), 13 * 400 + 1)
    jnd = cumulative_trapezoid(_csf_sensitivity(10.0 ** fine) * np.log(10.0), fine, initial=0.0)
    grid = np.union1d(np.linspace(fine[0], fine[-1], 13 * 20 + 1),
                      np.log10([ANCHOR_LOW[0], ANCHOR_HIGH[0]]))
    vals = np.interp(grid, fine, jnd)
    lo = np.interp(np.log10(ANCHOR_LOW[0]), fine, jnd)
    hi = np.interp(np.log10(ANCHOR_HIGH[0]), fine, jnd)
    codes = ANCHOR_LOW[1] + (vals - lo) * (ANCHOR_HIGH[1] - ANCHOR_LOW[1]) / (hi - lo)
    return PuCurve(grid, codes)


def pu_encode(lum, curve: PuCurve | None = None) -> np.ndarray:
    return (curve or default_curve()).encode(lum)


def _luma_nits(x) -> np.ndarray:
    arr = _as_nits(x)
    if arr.ndim == 3:
        return arr @ REC709 if arr.shape[2] == 3 else arr[:, :, 0]
    return arr


def pu_peak(peak_nits: float, curve: PuCurve | None = None) -> float:
    curve = curve or default_curve()
    return float(curve.encode(peak_nits) - curve.encode(ANCHOR_LOW[0]))


def pu_psnr(a, b, peak_nits: float = 4000.0, curve: PuCurve | None = None) -> float:
    """PSNR (dB) of PU-encoded luminance, capped at ``PSNR_CAP``."""
    la, lb = _luma_nits(a), _luma_nits(b)
    if la.shape != lb.shape:
        raise ValueError(f"dimension mismatch {la.shape} vs {lb.shape}")
    curve = curve or default_curve()
    diff = curve.encode(la) - curve.encode(lb)
    mse = float(np.mean(diff * diff))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(pu_peak(peak_nits, curve) ** 2 / mse))


def _gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(x, g):
    x = sliding_window_view(x, len(g), axis=0) @ g
    return sliding_window_view(x, len(g), axis=1) @ g


def ssim_components(x, y, data_range: float) -> tuple[float, float]:
    """Mean SSIM and mean contrast-structure term over the valid region."""
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _downsample(x):
    """2x2 box average; an odd axis gets one leading zero and its blocks still divide by 4."""
    x = np.pad(x, ((x.shape[0] % 2, 0), (x.shape[1] % 2, 0)))
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim(x, y, data_range: float, scales: int = 5) -> tuple[float, int]:
    """Multi-scale SSIM of two single-channel rasters.

    Returns ``(score, scales_used)``. Images too small for ``scales`` fall back
    to fewer scales with the leading weights renormalised to sum to one. Negative
    per-scale terms are clamped at zero so the score stays in [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch {x.shape} vs {y.shape}")
    min_dim = min(x.shape)
    if min_dim < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN} pixels on each side")
    usable = min(scales, int(np.floor(np.log2(min_dim / SSIM_WIN))) + 1)
    if usable < scales:
        warnings.warn(f"MS-SSIM: image too small for {scales} scales, using {usable}", stacklevel=2)
    # the published weights sum to 1.0001 and are used as-is; a truncated set is renormalised
    weights = MS_SSIM_WEIGHTS[:usable]
    if usable < len(MS_SSIM_WEIGHTS):
        weights = weights / weights.sum()
    score = 1.0
    for s in range(usable):
        ssim, cs = ssim_components(x, y, data_range)
        term = ssim if s == usable - 1 else cs
        score *= max(term, 0.0) ** weights[s]
        if s < usable - 1:
            x, y = _downsample(x), _downsample(y)
    return float(score), usable


def pu_ms_ssim(a, b, peak_nits: float = 4000.0, curve: PuCurve | None = None, scales: int = 5) -> float:
    curve = curve or default_curve()
    la, lb = _luma_nits(a), _luma_nits(b)
    return ms_ssim(curve.encode(la), curve.encode(lb), pu_peak(peak_nits, curve), scales)[0]


def psr(b: Backlight, m_max: float | None = None) -> float:
    """Power saving ratio in percent under a linear LED power model."""
    m_max = b.layout.n_leds if m_max is None else m_max
    return 100.0 * (1.0 - float(np.sum(b.values)) / m_max)


@dataclass
class MetricReport:
    pu_psnr: float
    pu_ms_ssim: float
    psr: float
    clipping_fraction: float

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(target: HdrImage, displayed: HdrImage, b: Backlight, clipping: float,
             peak_nits: float = 4000.0, curve: PuCurve | None = None) -> MetricReport:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ssim = pu_ms_ssim(target, displayed, peak_nits, curve)
    return MetricReport(pu_psnr(target, displayed, peak_nits, curve), ssim, psr(b), clipping)


def load_curve(path: str | Path | None) -> PuCurve:
    return default_curve() if path is None else PuCurve.from_csv(path)
