"""Dual-panel display model: LED grid, PSF diffusion, LC transmittance.

All luminance quantities in this module are absolute (cd/m^2). The chain is

    sparse LED raster --(PSF convolution)--> D
    T = clamp(I / D, leak_floor, 1)
    displayed = D * T   (broadcast over colour channels)

which collapses to ``displayed_c = clamp(I_c, leak_floor * D, D)``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .fftconv import BOUNDARIES, conv2_large, corr2_large
from .hdrio import HdrImage, luminance, read_pfm

# Below this diffused luminance the LC cell is treated as fully open.
DARK_NITS = 1e-6
CLIP_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class BacklightLayout:
    """Rectangular LED grid over the panel.

    Segment edges are the rounded equal divisions of the panel; each LED sits
    at the integer midpoint of its segment. LEDs are indexed row-major.
    """

    led_rows: int
    led_cols: int
    panel_height: int
    panel_width: int
    max_drive_nits: float = 4000.0

    def __post_init__(self):
        if self.led_rows < 1 or self.led_cols < 1:
            raise ValueError("need at least one LED row and column")
        if self.led_rows > self.panel_height or self.led_cols > self.panel_width:
            raise ValueError("more LEDs than pixels along an axis")
        if not self.max_drive_nits > 0:
            raise ValueError("max_drive_nits must be positive")

    @property
    def n_leds(self) -> int:
        return self.led_rows * self.led_cols

    @property
    def shape(self) -> tuple[int, int]:
        return self.panel_height, self.panel_width

    @cached_property
    def row_edges(self) -> np.ndarray:
        return np.round(np.linspace(0, self.panel_height, self.led_rows + 1)).astype(int)

    @cached_property
    def col_edges(self) -> np.ndarray:
        return np.round(np.linspace(0, self.panel_width, self.led_cols + 1)).astype(int)

    @cached_property
    def centers(self) -> np.ndarray:
        """``(N, 2)`` integer array of (row, col) LED positions."""
        r = (self.row_edges[:-1] + self.row_edges[1:]) // 2
        c = (self.col_edges[:-1] + self.col_edges[1:]) // 2
        rr, cc = np.meshgrid(r, c, indexing="ij")
        out = np.stack([rr.ravel(), cc.ravel()], axis=1)
        out.setflags(write=False)
        return out

    @cached_property
    def segment_map(self) -> np.ndarray:
        """Per-pixel LED index."""
        rows = np.searchsorted(self.row_edges, np.arange(self.panel_height), side="right") - 1
        cols = np.searchsorted(self.col_edges, np.arange(self.panel_width), side="right") - 1
        out = rows[:, None] * self.led_cols + cols[None, :]
        out.setflags(write=False)
        return out

    @property
    def pitch(self) -> float:
        return 0.5 * (self.panel_height / self.led_rows + self.panel_width / self.led_cols)

    def to_dict(self) -> dict:
        return {"led_rows": self.led_rows, "led_cols": self.led_cols,
                "panel_height": self.panel_height, "panel_width": self.panel_width,
                "max_drive_nits": self.max_drive_nits}


@dataclass(frozen=True, eq=False)
class Backlight:
    layout: BacklightLayout
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).ravel()
        if v.size != self.layout.n_leds:
            raise ValueError(f"expected {self.layout.n_leds} backlight values, got {v.size}")
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise ValueError("backlight values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def full(cls, layout: BacklightLayout, value: float = 1.0) -> "Backlight":
        return cls(layout, np.full(layout.n_leds, value))

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.layout.led_rows, self.layout.led_cols)


@dataclass(frozen=True, eq=False)
class Psf:
    """Non-negative diffusion kernel, anchored at ``((kh-1)//2, (kw-1)//2)``."""

    kernel: np.ndarray

    def __post_init__(self):
        k = np.array(self.kernel, dtype=np.float64)
        if k.ndim != 2 or min(k.shape) < 1:
            raise ValueError("PSF kernel must be a non-empty 2-D array")
        if not np.all(np.isfinite(k)) or k.min() < 0:
            raise ValueError("PSF entries must be finite and non-negative")
        k.setflags(write=False)
        object.__setattr__(self, "kernel", k)

    @property
    def gain(self) -> float:
        return float(self.kernel.sum())

    @classmethod
    def delta(cls, value: float = 1.0) -> "Psf":
        return cls(np.array([[value]]))


@dataclass(frozen=True, eq=False)
class DisplayConfig:
    layout: BacklightLayout
    psf: Psf
    leak_floor: float = 0.001
    peak_nits: float = 4000.0
    boundary: str = "zero"

    def __post_init__(self):
        if not 0 <= self.leak_floor < 1:
            raise ValueError("leak_floor must be in [0, 1)")
        if not self.peak_nits > 0:
            raise ValueError("peak_nits must be positive")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}")

    @classmethod
    def default(cls, panel_height: int = 1080, panel_width: int = 1920, led_rows: int = 12,
                led_cols: int = 22, peak_nits: float = 4000.0, leak_floor: float = 0.001,
                boundary: str = "zero") -> "DisplayConfig":
        layout = BacklightLayout(led_rows, led_cols, panel_height, panel_width, peak_nits)
        psf = gaussian_psf(layout, peak_nits=peak_nits, boundary=boundary)
        return cls(layout, psf, leak_floor, peak_nits, boundary)


# ----------------------------------------------------------------------------
# PSF construction

def gaussian_kernel(sigma: float, size: int | None = None) -> np.ndarray:
    """Isotropic Gaussian; default support is 6 sigma wide (odd size)."""
    if size is None:
        size = 2 * int(np.ceil(3 * sigma)) + 1
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return np.outer(g, g)


def normalize_psf(kernel: np.ndarray, layout: BacklightLayout, peak_nits: float,
                  boundary: str = "zero") -> Psf:
    """Scale ``kernel`` so an all-on backlight gives ``peak_nits`` at the panel centre."""
    raster = np.zeros(layout.shape)
    raster[layout.centers[:, 0], layout.centers[:, 1]] = layout.max_drive_nits
    d = conv2_large(raster, kernel, boundary)
    centre = d[layout.panel_height // 2, layout.panel_width // 2]
    if centre <= 0:
        raise ValueError("PSF does not reach the panel centre from any LED")
    return Psf(np.asarray(kernel, dtype=np.float64) * (peak_nits / centre))


def gaussian_psf(layout: BacklightLayout, peak_nits: float = 4000.0, sigma_pitch: float = 0.6,
                 boundary: str = "zero") -> Psf:
    return normalize_psf(gaussian_kernel(sigma_pitch * layout.pitch), layout, peak_nits, boundary)


def segment_psf(layout: BacklightLayout) -> Psf:
    """Unit-gain box PSF that lights exactly each LED's own segment.

    Needs equal segment sizes. An even side ``L`` gets an ``L + 1`` box whose
    last row (or column) is zero, so the box still starts at the segment edge
    given the kernel anchor ``(k - 1) // 2``. Under this PSF the diffused
    backlight is the piecewise-constant upsampling of the LED values.
    """
    hs, ws = np.unique(np.diff(layout.row_edges)), np.unique(np.diff(layout.col_edges))
    if len(hs) != 1 or len(ws) != 1:
        raise ValueError("segment PSF needs equal segment sizes")
    sh, sw = int(hs[0]), int(ws[0])
    kernel = np.zeros((sh + 1 - sh % 2, sw + 1 - sw % 2))
    kernel[:sh, :sw] = 1.0
    return Psf(kernel)


def load_psf(path, layout: BacklightLayout | None = None, peak_nits: float | None = None,
             boundary: str = "zero") -> Psf:
    """Load a grayscale PFM PSF.

    When ``layout`` and ``peak_nits`` are given the kernel is rescaled with
    :func:`normalize_psf`; otherwise it is used as stored.
    """
    img = read_pfm(path)
    kernel = img.data.mean(axis=2) if img.channels == 3 else img.data[:, :, 0]
    if layout is not None and peak_nits is not None:
        return normalize_psf(kernel, layout, peak_nits, boundary)
    return Psf(kernel)


# ----------------------------------------------------------------------------
# Optical chain

def _as_nits(target) -> np.ndarray:
    if isinstance(target, HdrImage):
        return target.data * target.nits_per_unit if target.calibrated else target.data
    return np.asarray(target, dtype=np.float64)


def prepare_target(image: HdrImage, cfg: DisplayConfig) -> HdrImage:
    """Convert to cd/m^2 and clip at the display peak.

    Calibrated images use their ``nits_per_unit``; uncalibrated ones are
    scaled so their maximum luminance equals ``cfg.peak_nits``.
    """
    if image.channels != 3:
        raise ValueError("target must be an RGB image")
    if image.calibrated:
        nits = image.data * image.nits_per_unit
    else:
        ymax = luminance(image).max()
        nits = image.data * (cfg.peak_nits / ymax) if ymax > 0 else image.data.copy()
    return HdrImage(np.minimum(nits, cfg.peak_nits), nits_per_unit=1.0, calibrated=True)


def sparse_backlight_raster(b: Backlight) -> np.ndarray:
    lay = b.layout
    out = np.zeros(lay.shape)
    out[lay.centers[:, 0], lay.centers[:, 1]] = b.values * lay.max_drive_nits
    return out


def diffuse(b: Backlight, cfg: DisplayConfig) -> np.ndarray:
    """Diffused backlight luminance D (cd/m^2), clamped at zero."""
    d = conv2_large(sparse_backlight_raster(b), cfg.psf.kernel, cfg.boundary)
    return np.maximum(d, 0.0)


def diffuse_adjoint(grad_d: np.ndarray, cfg: DisplayConfig) -> np.ndarray:
    """Gradient w.r.t. backlight values given a gradient w.r.t. D (pre-clamp)."""
    lay = cfg.layout
    g = corr2_large(grad_d, cfg.psf.kernel, cfg.boundary)
    return g[lay.centers[:, 0], lay.centers[:, 1]] * lay.max_drive_nits


def ideal_transmittance(target, d: np.ndarray, cfg: DisplayConfig) -> np.ndarray:
    """Per-channel LC transmittance ``clamp(I / D, leak_floor, 1)``; 1 where D is dark."""
    nits = _as_nits(target)
    d = np.asarray(d, dtype=np.float64)
    dark = d < DARK_NITS
    safe = np.where(dark, 1.0, d)
    t = np.clip(nits / safe[:, :, None], cfg.leak_floor, 1.0)
    t[dark] = 1.0
    return t


def reconstruct(d: np.ndarray, t: np.ndarray) -> HdrImage:
    d = np.asarray(d, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3 or d.shape != t.shape[:2]:
        raise ValueError(f"shape mismatch between D {d.shape} and T {t.shape}")
    return HdrImage(d[:, :, None] * t, nits_per_unit=1.0, calibrated=True)


@dataclass
class Simulation:
    diffusion: np.ndarray
    transmittance: np.ndarray
    displayed: HdrImage
    clipping_fraction: float = field(default=0.0)


def simulate_full(target, b: Backlight, cfg: DisplayConfig) -> Simulation:
    nits = _as_nits(target)
    d = diffuse(b, cfg)
    t = ideal_transmittance(nits, d, cfg)
    return Simulation(d, t, reconstruct(d, t), clipping_fraction(nits, d))


def simulate(target, b: Backlight, cfg: DisplayConfig) -> HdrImage:
    """Displayed image for ``target`` (cd/m^2) under backlight ``b``."""
    d = diffuse(b, cfg)
    return reconstruct(d, ideal_transmittance(target, d, cfg))


def segment_stats(luma: np.ndarray, layout: BacklightLayout) -> tuple[np.ndarray, np.ndarray]:
    """Per-LED maximum and mean of ``luma`` over each segment."""
    luma = np.asarray(luma, dtype=np.float64)
    if luma.shape != layout.shape:
        raise ValueError(f"luminance map {luma.shape} does not match panel {layout.shape}")
    r0, c0 = layout.row_edges[:-1], layout.col_edges[:-1]
    seg_max = np.maximum.reduceat(np.maximum.reduceat(luma, r0, axis=0), c0, axis=1)
    seg_sum = np.add.reduceat(np.add.reduceat(luma, r0, axis=0), c0, axis=1)
    areas = np.outer(np.diff(layout.row_edges), np.diff(layout.col_edges))
    return seg_max.ravel(), (seg_sum / areas).ravel()


def clipping_fraction(target, d: np.ndarray) -> float:
    """Fraction of channel-pixels whose target exceeds the diffused backlight.

    A pixel counts as clipped only when it exceeds D by more than
    ``CLIP_RTOL`` relative, so FFT roundoff on an exactly matched backlight
    does not register as clipping.
    """
    nits = _as_nits(target)
    d = np.asarray(d)[:, :, None]
    return float(np.mean(nits > d * (1.0 + CLIP_RTOL)))


# ----------------------------------------------------------------------------
# Backlight serialisation

def save_backlight(b: Backlight, path) -> None:
    """Write as JSON (``.json``) or CSV with columns ``led,value``."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        payload = {"layout": b.layout.to_dict(), "values": [float(v) for v in b.values]}
        path.write_text(json.dumps(payload, indent=1))
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["led", "value"])
        for k, v in enumerate(b.values):
            w.writerow([k, repr(float(v))])


def load_backlight(path, layout: BacklightLayout) -> Backlight:
    path = Path(path)
    if path.suffix.lower() == ".json":
        payload = json.loads(path.read_text())
        stored = payload.get("layout")
        if stored is not None and (stored["led_rows"], stored["led_cols"]) != (layout.led_rows, layout.led_cols):
            raise ValueError(
                f"backlight was saved for a {stored['led_rows']}x{stored['led_cols']} grid, "
                f"layout is {layout.led_rows}x{layout.led_cols}")
        return Backlight(layout, payload["values"])
    values = np.full(layout.n_leds, np.nan)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            k = int(row["led"])
            if not 0 <= k < layout.n_leds:
                raise ValueError(f"LED index {k} outside layout with {layout.n_leds} LEDs")
            values[k] = float(row["value"])
    if np.isnan(values).any():
        raise ValueError("backlight CSV does not cover every LED of the layout")
    return Backlight(layout, values)
