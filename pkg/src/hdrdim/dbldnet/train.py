"""Training loop: one image per step, random intensity range and power parameter."""
from __future__ import annotations

import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from ..display import DisplayConfig
from ..hdrio import HdrImage, luminance
from ..optim import LossConfig, OptimConfig, loss_and_grad
from .model import NetConfig, NetParams, backward, centers_upstream, check_params, forward, init_params

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iteration", "image", "p_a", "L", "L_reg", "L_mag")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    seed: int = 0
    intensity_range: tuple = (3000.0, 5000.0)
    pa_range: tuple = (0.0, 1.0)
    log_every: int = 100


def augment(image: HdrImage, cfg: DisplayConfig, rng: np.random.Generator,
            intensity_range=(3000.0, 5000.0)) -> np.ndarray:
    """Rescale so the peak luminance is drawn from ``intensity_range``, then clip at the display peak."""
    data = image.data
    ymax = luminance(image).max()
    target_max = rng.uniform(*intensity_range)
    nits = data * (target_max / ymax) if ymax > 0 else data.copy()
    return np.minimum(nits, cfg.peak_nits)


class Adam:
    def __init__(self, params: NetParams, oc: OptimConfig):
        self.oc = oc
        self.t = 0
        self.m = OrderedDict((k, np.zeros_like(v)) for k, v in params.tensors.items())
        self.v = OrderedDict((k, np.zeros_like(v)) for k, v in params.tensors.items())

    def step(self, params: NetParams, grads) -> None:
        oc = self.oc
        self.t += 1
        c1 = 1 - oc.beta1 ** self.t
        c2 = 1 - oc.beta2 ** self.t
        for k, p in params.tensors.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= oc.beta1
            m += (1 - oc.beta1) * g
            v *= oc.beta2
            v += (1 - oc.beta2) * g * g
            p -= oc.lr * (m / c1) / (np.sqrt(v / c2) + oc.eps)


def train_step(params, image_nits, p_a, cfg, lc):
    """One forward/backward pass; returns (loss terms, parameter gradients)."""
    res = forward(params, image_nits / cfg.peak_nits, p_a, cfg.layout)
    terms, g_vals = loss_and_grad(res.backlight.values, image_nits, cfg, lc.with_pa(p_a))
    grads = backward(res, centers_upstream(cfg.layout, g_vals))
    return terms, grads


def train(dataset, cfg: DisplayConfig, lc: LossConfig = LossConfig(), nc: NetConfig = NetConfig(),
          oc: OptimConfig = OptimConfig(), tc: TrainConfig = TrainConfig(),
          params: NetParams | None = None):
    """Fit the predictor on ``dataset`` (a non-empty list of ``HdrImage``).

    Each step draws an image, an intensity scale and ``p_a`` from a generator
    seeded by ``tc.seed``, evaluates the display loss on the sampled
    backlight and applies one Adam update. Returns ``(params, history)``
    where history rows follow ``HISTORY_COLUMNS``.
    """
    if not dataset:
        raise ValueError("training set is empty")
    for img in dataset:
        if img.height != cfg.layout.panel_height or img.width != cfg.layout.panel_width:
            raise ValueError(f"training image {img.height}x{img.width} does not match the panel")
    params = init_params(nc) if params is None else params.copy()
    check_params(params, nc)
    rng = np.random.default_rng(tc.seed)
    opt = Adam(params, oc)
    history = []
    for it in range(tc.iterations):
        idx = int(rng.integers(len(dataset)))
        nits = augment(dataset[idx], cfg, rng, tc.intensity_range)
        p_a = float(rng.uniform(*tc.pa_range))
        terms, grads = train_step(params, nits, p_a, cfg, lc)
        history.append((it, idx, p_a, terms.total, terms.reg, terms.mag))
        if not np.isfinite(terms.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(f"non-finite loss or gradient at iteration {it}", history)
        opt.step(params, grads)
        if tc.log_every and (it + 1) % tc.log_every == 0:
            recent = np.mean([h[3] for h in history[-tc.log_every:]])
            log.info("iteration %d: mean loss %.5g", it + 1, recent)
    return params, history


def predict(params: NetParams, image_nits: np.ndarray, p_a: float, cfg: DisplayConfig):
    """Backlight for an image already in cd/m^2 (clipped to peak)."""
    return forward(params, image_nits / cfg.peak_nits, p_a, cfg.layout, record=False).backlight


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row[0], row[1], repr(float(row[2]))] + [repr(float(x)) for x in row[3:]])
