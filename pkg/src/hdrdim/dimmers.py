"""Classical backlight dimming baselines.

Each dimmer works on the Rec. 709 luminance of a target already expressed
in cd/m^2 and clipped to the display peak, and returns drive values in
[0, 1] (luminance divided by ``peak_nits``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .display import Backlight, DisplayConfig, _as_nits, segment_stats
from .hdrio import REC709

KINDS = ("max", "avg", "lp", "imf")


@dataclass(frozen=True)
class DimmerSpec:
    kind: str = "max"
    lp_c: float = 0.5
    imf_w: float = 0.5
    imf_bins: int = 256

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dimmer {self.kind!r}; expected one of {KINDS}")
        if not 0 <= self.lp_c <= 1:
            raise ValueError("lp_c must lie in [0, 1]")
        if not 0 <= self.imf_w <= 1:
            raise ValueError("imf_w must lie in [0, 1]")
        if self.imf_bins < 2:
            raise ValueError("imf_bins must be at least 2")


def _normalized_stats(target, cfg: DisplayConfig):
    luma = _as_nits(target) @ REC709 / cfg.peak_nits
    seg_max, seg_avg = segment_stats(luma, cfg.layout)
    return luma, seg_max, seg_avg


def _backlight(cfg: DisplayConfig, values) -> Backlight:
    return Backlight(cfg.layout, np.clip(values, 0.0, 1.0))


def dim_max(target, cfg: DisplayConfig) -> Backlight:
    _, seg_max, _ = _normalized_stats(target, cfg)
    return _backlight(cfg, seg_max)


def dim_avg(target, cfg: DisplayConfig) -> Backlight:
    _, _, seg_avg = _normalized_stats(target, cfg)
    return _backlight(cfg, seg_avg)


def dim_lp(target, cfg: DisplayConfig, c: float = 0.5) -> Backlight:
    """Average plus a fraction ``c`` of the local max-minus-average gap."""
    if not 0 <= c <= 1:
        raise ValueError("c must lie in [0, 1]")
    _, seg_max, seg_avg = _normalized_stats(target, cfg)
    return _backlight(cfg, seg_avg + c * (seg_max - seg_avg))


def inverse_cdf(luma: np.ndarray, bins: int):
    """Left-continuous inverse of the global luminance histogram CDF.

    Luminance in ``[0, 1]`` is binned into ``bins`` equal-width bins and each
    non-empty bin is represented by the mean of its samples, so the CDF is a
    step function over those representatives and ``F^-1(q)`` is the
    smallest representative whose cumulative share reaches ``q``. Returns a
    vectorised callable.
    """
    luma = np.clip(np.ravel(luma), 0.0, 1.0)
    idx = np.minimum((luma * bins).astype(int), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    sums = np.bincount(idx, weights=luma, minlength=bins)
    occupied = counts > 0
    reps = sums[occupied] / counts[occupied]
    cdf = np.cumsum(counts[occupied]) / luma.size

    def finv(q):
        q = np.asarray(q, dtype=np.float64)
        k = np.searchsorted(cdf, q, side="left")
        return reps[np.clip(k, 0, len(reps) - 1)]

    return finv


def dim_imf(target, cfg: DisplayConfig, w: float = 0.5, bins: int = 256) -> Backlight:
    """Map a weighted max/mean blend through the inverse global CDF."""
    if not 0 <= w <= 1:
        raise ValueError("w must lie in [0, 1]")
    luma, seg_max, seg_avg = _normalized_stats(target, cfg)
    v = w * seg_max + (1 - w) * seg_avg
    return _backlight(cfg, inverse_cdf(luma, bins)(v))


def run_dimmer(spec: DimmerSpec, target, cfg: DisplayConfig) -> Backlight:
    if spec.kind == "max":
        return dim_max(target, cfg)
    if spec.kind == "avg":
        return dim_avg(target, cfg)
    if spec.kind == "lp":
        return dim_lp(target, cfg, spec.lp_c)
    return dim_imf(target, cfg, spec.imf_w, spec.imf_bins)
