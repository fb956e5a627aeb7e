"""Power-conditioned display loss, its analytic gradient, and a per-image
projected-Adam backlight optimiser.

The loss is

    L = mean(smooth_l1(displayed - target)) + p_a * beta * sum(B) / m_max

with images normalised by the display peak (or PU-encoded when
``loss_domain == "pu"``).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .display import DARK_NITS, Backlight, DisplayConfig, _as_nits, diffuse_adjoint
from .fftconv import conv2_large
from .metrics import default_curve, pu_peak

log = logging.getLogger(__name__)

DOMAINS = ("linear", "pu")
INITS = ("from_max", "from_avg", "constant")


@dataclass(frozen=True)
class LossConfig:
    p_a: float = 0.5
    beta: float = 20.0
    delta: float = 1.0
    m_max: float | None = None  # None means the LED count
    loss_domain: str = "linear"

    def __post_init__(self):
        if not 0 <= self.p_a <= 1.25:
            raise ValueError("p_a must lie in [0, 1.25]")
        if not self.beta > 0 or not self.delta > 0:
            raise ValueError("beta and delta must be positive")
        if self.m_max is not None and not self.m_max > 0:
            raise ValueError("m_max must be positive")
        if self.loss_domain not in DOMAINS:
            raise ValueError(f"loss_domain must be one of {DOMAINS}")

    def with_pa(self, p_a: float) -> "LossConfig":
        return LossConfig(p_a, self.beta, self.delta, self.m_max, self.loss_domain)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    max_iters: int = 2000
    rel_tol: float = 1e-7
    window: int = 50
    init: str = "from_max"
    init_value: float = 0.5

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")


def smooth_l1(r, delta):
    a = np.abs(r)
    return np.where(a < delta, 0.5 * r * r / delta, a - 0.5 * delta)


def smooth_l1_grad(r, delta):
    return np.where(np.abs(r) < delta, r / delta, np.sign(r))


@dataclass
class LossTerms:
    total: float
    reg: float
    mag: float


def _display_chain(values, nits, cfg):
    """Raw diffused luminance, clamped D and the displayed image."""
    lay = cfg.layout
    raster = np.zeros(lay.shape)
    raster[lay.centers[:, 0], lay.centers[:, 1]] = values * lay.max_drive_nits
    raw = conv2_large(raster, cfg.psf.kernel, cfg.boundary)
    d = np.maximum(raw, 0.0)
    dd = d[:, :, None]
    disp = np.maximum(nits, cfg.leak_floor * dd)
    np.minimum(disp, dd, out=disp)
    dark = d < DARK_NITS
    if dark.any():
        disp[dark] = dd[dark]
    return raw, d, disp, dark


def _slope(r, dark, eps):
    """d(displayed)/dD where the residual is non-zero.

    Inside the clamp the residual is exactly zero, so only the clipped
    (r < 0, slope 1) and leaking (r > 0, slope eps) branches matter; dark
    pixels pass D straight through.
    """
    slope = np.where(r > 0, eps, 1.0)
    if dark.any():
        slope[dark] = 1.0
    return slope


def _residual(disp, nits, cfg, lc, curve):
    if lc.loss_domain == "linear":
        r = disp - nits
        r *= 1.0 / cfg.peak_nits
        return r, None
    scale = pu_peak(cfg.peak_nits, curve)
    r = (curve.encode(disp) - curve.encode(nits)) / scale
    return r, curve.derivative(disp) / scale


def _reg_and_grad(r, delta):
    """Mean smooth-L1 and its gradient w.r.t. ``r``."""
    n = r.size
    if np.abs(r).max(initial=0.0) < delta:
        return float(np.vdot(r, r)) * 0.5 / (delta * n), r * (1.0 / (delta * n))
    return float(np.mean(smooth_l1(r, delta))), smooth_l1_grad(r, delta) / n


def _m_max(cfg, lc):
    return float(cfg.layout.n_leds if lc.m_max is None else lc.m_max)


def loss_terms(b: Backlight | np.ndarray, target, cfg: DisplayConfig, lc: LossConfig) -> LossTerms:
    values = b.values if isinstance(b, Backlight) else np.asarray(b, dtype=np.float64)
    nits = _as_nits(target)
    _, _, disp, _ = _display_chain(values, nits, cfg)
    r, _ = _residual(disp, nits, cfg, lc, default_curve())
    reg = float(np.mean(smooth_l1(r, lc.delta)))
    mag = float(np.sum(values)) / _m_max(cfg, lc)
    return LossTerms(reg + lc.p_a * lc.beta * mag, reg, mag)


def loss(b, target, cfg: DisplayConfig, lc: LossConfig) -> float:
    """Scalar loss for backlight ``b`` on a target in cd/m^2 (clipped to peak)."""
    return loss_terms(b, target, cfg, lc).total


def loss_and_grad(b, target, cfg: DisplayConfig, lc: LossConfig) -> tuple[LossTerms, np.ndarray]:
    values = b.values if isinstance(b, Backlight) else np.asarray(b, dtype=np.float64)
    nits = _as_nits(target)
    raw, _, disp, dark = _display_chain(values, nits, cfg)
    r, dr_ddisp = _residual(disp, nits, cfg, lc, default_curve())
    reg, g_r = _reg_and_grad(r, lc.delta)
    m_max = _m_max(cfg, lc)
    mag = float(np.sum(values)) / m_max
    terms = LossTerms(reg + lc.p_a * lc.beta * mag, reg, mag)

    if dr_ddisp is None:
        g_r *= 1.0 / cfg.peak_nits
    else:
        g_r *= dr_ddisp
    g_r *= _slope(r, dark, cfg.leak_floor)
    g_d = g_r.sum(axis=2)
    g_d[raw <= 0] = 0.0
    grad = diffuse_adjoint(g_d, cfg) + lc.p_a * lc.beta / m_max
    return terms, grad


def loss_grad(b, target, cfg: DisplayConfig, lc: LossConfig) -> np.ndarray:
    """Gradient of :func:`loss` with respect to the N backlight values.

    Clamp kinks take the interior (zero-slope) branch.
    """
    return loss_and_grad(b, target, cfg, lc)[1]


class OptimizationError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class OptimResult:
    backlight: Backlight
    trace: list = field(default_factory=list)  # (iteration, L, L_reg, L_mag)
    iterations: int = 0
    converged: bool = False

    @property
    def final_loss(self) -> float:
        return min(row[1] for row in self.trace)


def initial_values(target, cfg: DisplayConfig, oc: OptimConfig) -> np.ndarray:
    from .dimmers import dim_avg, dim_max

    if oc.init == "from_max":
        return dim_max(target, cfg).values.copy()
    if oc.init == "from_avg":
        return dim_avg(target, cfg).values.copy()
    return np.full(cfg.layout.n_leds, float(np.clip(oc.init_value, 0, 1)))


def optimize_backlight(target, cfg: DisplayConfig, lc: LossConfig,
                       oc: OptimConfig = OptimConfig()) -> OptimResult:
    """Projected Adam on the box [0, 1]^N.

    The returned backlight is the lowest-loss iterate visited. Iteration
    stops after ``max_iters`` steps or when the loss improved by less than
    ``rel_tol`` (relative) over the last ``window`` steps.
    """
    nits = _as_nits(target)
    x = initial_values(nits, cfg, oc)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace = []
    best_x, best_loss = x.copy(), np.inf
    converged = False
    it = 0
    for it in range(oc.max_iters + 1):
        terms, g = loss_and_grad(x, nits, cfg, lc)
        trace.append((it, terms.total, terms.reg, terms.mag))
        if not np.isfinite(terms.total) or not np.all(np.isfinite(g)):
            raise OptimizationError(f"non-finite loss at iteration {it}", trace)
        if terms.total < best_loss:
            best_loss, best_x = terms.total, x.copy()
        if it >= oc.window:
            old = trace[it - oc.window][1]
            if old - terms.total < oc.rel_tol * max(abs(old), 1e-300):
                converged = True
                break
        if it == oc.max_iters:
            break
        t = it + 1
        m = oc.beta1 * m + (1 - oc.beta1) * g
        v = oc.beta2 * v + (1 - oc.beta2) * g * g
        mhat = m / (1 - oc.beta1 ** t)
        vhat = v / (1 - oc.beta2 ** t)
        x = np.clip(x - oc.lr * mhat / (np.sqrt(vhat) + oc.eps), 0.0, 1.0)
    log.debug("optimize_backlight: %d iterations, loss %.6g", it, best_loss)
    return OptimResult(Backlight(cfg.layout, best_x), trace, it, converged)


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "L", "L_reg", "L_mag"])
        for row in trace:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
