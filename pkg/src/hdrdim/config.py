"""Run configuration: INI file plus command-line overrides.

Precedence is flags > file > built-in defaults. The file path defaults to the
``HDRDIM_CONFIG`` environment variable when no ``--config`` flag is given.

Example::

    [display]
    led_rows = 12
    led_cols = 22
    peak_nits = 4000
    leak_floor = 0.001
    boundary = zero
    psf_sigma_pitch = 0.6
    # psf = measured_psf.pfm

    [dimmer]
    kind = max

    [loss]
    p_a = 0.5
    beta = 20

    [optim]
    lr = 0.001
    max_iters = 2000

    [net]
    stages = 3
    widths = 16, 32, 64

    [train]
    iterations = 2000
    seed = 0
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from .dbldnet.model import NetConfig
from .dbldnet.train import TrainConfig
from .dimmers import DimmerSpec
from .display import BacklightLayout, DisplayConfig, gaussian_kernel, load_psf, normalize_psf
from .fftconv import BOUNDARIES
from .metrics import PuCurve, load_curve
from .optim import LossConfig, OptimConfig

ENV_VAR = "HDRDIM_CONFIG"
FORMATS = ("csv", "json")


class ConfigError(ValueError):
    """Invalid configuration file, flag or parameter value."""


@dataclass(frozen=True)
class DisplaySettings:
    """Panel-size independent display parameters; the panel size comes from each image."""
    led_rows: int = 12
    led_cols: int = 22
    peak_nits: float = 4000.0
    max_drive_nits: float | None = None  # None means peak_nits
    leak_floor: float = 0.001
    boundary: str = "zero"
    psf: str | None = None
    psf_sigma_pitch: float = 0.6
    psf_size: int | None = None
    psf_normalize: bool = True

    def __post_init__(self):
        if self.led_rows < 1 or self.led_cols < 1:
            raise ConfigError("led_rows and led_cols must be positive")
        if not self.peak_nits > 0:
            raise ConfigError("peak_nits must be positive")
        if not 0 <= self.leak_floor < 1:
            raise ConfigError("leak_floor must lie in [0, 1)")
        if self.boundary not in BOUNDARIES:
            raise ConfigError(f"boundary must be one of {BOUNDARIES}")
        if not self.psf_sigma_pitch > 0:
            raise ConfigError("psf_sigma_pitch must be positive")
        if self.psf_size is not None and (self.psf_size < 1 or self.psf_size % 2 == 0):
            raise ConfigError("psf_size must be a positive odd integer")
        if self.psf is not None and not Path(self.psf).is_file():
            raise ConfigError(f"PSF file not found: {self.psf}")

    def build(self, height: int, width: int) -> DisplayConfig:
        return _build_display(self, int(height), int(width))


@lru_cache(maxsize=16)
def _build_display(s: DisplaySettings, height: int, width: int) -> DisplayConfig:
    drive = s.peak_nits if s.max_drive_nits is None else s.max_drive_nits
    try:
        layout = BacklightLayout(s.led_rows, s.led_cols, height, width, drive)
        if s.psf is not None:
            psf = load_psf(s.psf, layout if s.psf_normalize else None,
                           s.peak_nits if s.psf_normalize else None, s.boundary)
        else:
            kernel = gaussian_kernel(s.psf_sigma_pitch * layout.pitch, s.psf_size)
            psf = normalize_psf(kernel, layout, s.peak_nits, s.boundary)
        return DisplayConfig(layout, psf, s.leak_floor, s.peak_nits, s.boundary)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class RunConfig:
    display: DisplaySettings = field(default_factory=DisplaySettings)
    dimmer: DimmerSpec = field(default_factory=DimmerSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pu_curve: str | None = None
    report_format: str = "csv"

    def curve(self) -> PuCurve:
        return load_curve(self.pu_curve)


# section name -> (RunConfig attribute, dataclass)
_SECTIONS = {
    "display": ("display", DisplaySettings),
    "dimmer": ("dimmer", DimmerSpec),
    "loss": ("loss", LossConfig),
    "optim": ("optim", OptimConfig),
    "net": ("net", NetConfig),
    "train": ("train", TrainConfig),
}
_TOP_LEVEL = {("metrics", "pu_curve"): "pu_curve", ("output", "format"): "report_format"}


def _convert(raw: str, current, ftype: str, key: str):
    """Parse ``raw`` using the declared type of the field it replaces."""
    text = raw.strip()
    none_ok = "None" in ftype
    if none_ok and text.lower() in ("", "none", "auto"):
        return None
    try:
        if "tuple" in ftype:
            parts = [p for p in text.replace(",", " ").split() if p]
            conv = int if "widths" in key else float
            return tuple(conv(p) for p in parts)
        if ftype.startswith("bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if ftype.startswith("int"):
            return int(text)
        if ftype.startswith("float"):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {ftype}") from exc
    return text


def _replace(obj, updates: dict, section: str):
    if not updates:
        return obj
    fields = {f.name: f for f in dataclasses.fields(obj)}
    parsed = {}
    for key, raw in updates.items():
        if key not in fields:
            raise ConfigError(f"unknown option [{section}] {key}")
        ftype = fields[key].type if isinstance(fields[key].type, str) else str(fields[key].type)
        parsed[key] = _convert(raw, getattr(obj, key), ftype, f"{section}.{key}") if isinstance(raw, str) else raw
    try:
        return dataclasses.replace(obj, **parsed)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def apply(rc: RunConfig, settings: dict) -> RunConfig:
    """Apply ``{"section.key": value}`` overrides (strings are parsed)."""
    grouped: dict[str, dict] = {}
    top = {}
    for dotted, value in settings.items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        if (section, key) in _TOP_LEVEL:
            top[_TOP_LEVEL[(section, key)]] = value
        elif section in _SECTIONS:
            grouped.setdefault(section, {})[key] = value
        else:
            raise ConfigError(f"unknown section [{section}]")
    changes = {}
    for section, updates in grouped.items():
        attr, _ = _SECTIONS[section]
        changes[attr] = _replace(getattr(rc, attr), updates, section)
    for attr, value in top.items():
        changes[attr] = None if value in (None, "", "none") else str(value)
    rc = dataclasses.replace(rc, **changes)
    if rc.report_format not in FORMATS:
        raise ConfigError(f"report format must be one of {FORMATS}")
    if rc.pu_curve is not None and not Path(rc.pu_curve).is_file():
        raise ConfigError(f"PU curve file not found: {rc.pu_curve}")
    return rc


def read_file(path) -> dict:
    """Flatten an INI file into ``{"section.key": "value"}``."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            out[f"{section}.{key}"] = value
    # relative paths inside the file are resolved against its directory
    base = Path(path).resolve().parent
    for key in ("display.psf", "metrics.pu_curve"):
        if out.get(key) and out[key].lower() not in ("none", "auto") and not Path(out[key]).is_absolute():
            out[key] = str(base / out[key])
    return out


def load(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    """Defaults, then the file (explicit path or ``$HDRDIM_CONFIG``), then overrides."""
    env = os.environ if env is None else env
    if path is None and env.get(ENV_VAR):
        path = env[ENV_VAR]
    rc = RunConfig()
    if path is not None:
        rc = apply(rc, read_file(path))
    if overrides:
        rc = apply(rc, overrides)
    return rc


def dump(rc: RunConfig) -> str:
    """INI text that reproduces ``rc`` when loaded."""
    parser = configparser.ConfigParser()
    for section, (attr, _) in _SECTIONS.items():
        obj = getattr(rc, attr)
        parser[section] = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            parser[section][f.name] = "none" if v is None else str(v)
    parser["metrics"] = {"pu_curve": rc.pu_curve or "none"}
    parser["output"] = {"format": rc.report_format}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()

