"""Desk-scale power-conditioned UNet backlight predictor.

Layout for ``stages = S`` and ``widths = (w1, ..., wS)``::

    input (RGB in [0, 1] + constant p_a plane)
      stem: conv3x3 -> IN -> ReLU                       -> skip[0]   (w1, full res)
      stage s = 1..S: residual block, stride 2           -> skip[s]   (w_s, 1/2^s)
        conv3x3/2 -> IN -> ReLU -> conv3x3 -> IN, plus conv1x1/2 -> IN shortcut, ReLU
      decoder s = S..1: bilinear x2, concat skip[s-1],
        conv3x3 -> IN -> ReLU -> conv3x3
      head: conv1x1 over [decoder features, input] -> sigmoid

The head also sees the raw input because instance normalisation discards
absolute intensity and the constant power plane.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..display import Backlight, BacklightLayout
from . import tape as T

CHECKPOINT_VERSION = 1


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 4
    stages: int = 3
    widths: tuple = (16, 32, 64)
    norm_eps: float = 1e-5
    seed: int = 0
    head_scale: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.in_channels != 4:
            raise ValueError("the predictor takes RGB plus one power plane")
        if self.stages < 1:
            raise ValueError("stages must be at least 1")
        if len(self.widths) != self.stages or min(self.widths) < 1:
            raise ValueError("need one positive width per stage")

    def skip_widths(self) -> list[int]:
        return [self.widths[0]] + list(self.widths)


@dataclass
class NetParams:
    config: NetConfig
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @property
    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def copy(self) -> "NetParams":
        return NetParams(self.config, OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def spec(self) -> "OrderedDict[str, tuple]":
        return OrderedDict((k, v.shape) for k, v in self.tensors.items())


def _conv_shapes(cfg: NetConfig):
    """Ordered (name, shape) list for every parameter."""
    shapes = []

    def conv(name, cin, cout, k):
        shapes.append((f"{name}.w", (cout, cin, k, k)))
        shapes.append((f"{name}.b", (cout,)))

    def norm(name, c):
        shapes.append((f"{name}.gamma", (c,)))
        shapes.append((f"{name}.beta", (c,)))

    skips = cfg.skip_widths()
    conv("stem.conv", cfg.in_channels, skips[0], 3)
    norm("stem.norm", skips[0])
    for s in range(1, cfg.stages + 1):
        cin, cout = skips[s - 1], skips[s]
        conv(f"enc{s}.conv1", cin, cout, 3)
        norm(f"enc{s}.norm1", cout)
        conv(f"enc{s}.conv2", cout, cout, 3)
        norm(f"enc{s}.norm2", cout)
        conv(f"enc{s}.proj", cin, cout, 1)
        norm(f"enc{s}.proj_norm", cout)
    for s in range(cfg.stages, 0, -1):
        cout = skips[s - 1]
        conv(f"dec{s}.conv1", skips[s] + skips[s - 1], cout, 3)
        norm(f"dec{s}.norm1", cout)
        conv(f"dec{s}.conv2", cout, cout, 3)
    conv("head", skips[0] + cfg.in_channels, 1, 1)
    return shapes


def init_params(cfg: NetConfig) -> NetParams:
    """He-style uniform init scaled by fan-in; the head is damped by ``head_scale``."""
    rng = np.random.default_rng(cfg.seed)
    params = NetParams(cfg)
    for name, shape in _conv_shapes(cfg):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            if name.startswith("head"):
                bound *= cfg.head_scale
            params.tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            params.tensors[name] = np.ones(shape)
        else:
            params.tensors[name] = np.zeros(shape)
    return params


def check_params(params: NetParams, cfg: NetConfig | None = None) -> None:
    cfg = cfg or params.config
    expected = OrderedDict(_conv_shapes(cfg))
    got = params.spec()
    if list(expected) != list(got) or any(tuple(expected[k]) != tuple(got[k]) for k in expected):
        missing = [k for k in expected if k not in got]
        extra = [k for k in got if k not in expected]
        bad = [k for k in expected if k in got and tuple(expected[k]) != tuple(got[k])]
        raise ShapeMismatchError(
            f"parameters do not match net config (stages={cfg.stages}, widths={cfg.widths}): "
            f"missing={missing[:4]} extra={extra[:4]} wrong_shape={bad[:4]}")
    for k, v in params.tensors.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"parameter {k} has non-finite values")


def make_input(image: np.ndarray, p_a: float) -> np.ndarray:
    """Stack an ``(H, W, 3)`` image in [0, 1] with a constant ``p_a`` plane."""
    img = np.asarray(image, dtype=np.float64)
    plane = np.full(img.shape[:2], float(p_a))
    return np.concatenate([img.transpose(2, 0, 1), plane[None]], axis=0)


@dataclass
class ForwardResult:
    map: np.ndarray                 # full-resolution prediction in (0, 1)
    backlight: Backlight | None
    tape: T.Tape
    output: T.Node
    nodes: dict                     # parameter name -> Node
    crop: tuple                     # (H, W) of the unpadded input


def forward(params: NetParams, image: np.ndarray, p_a: float,
            layout: BacklightLayout | None = None, record: bool = True) -> ForwardResult:
    """Run the predictor on an ``(H, W, 3)`` image normalised to [0, 1].

    Inputs whose sides are not divisible by ``2**stages`` are edge-padded and
    the output is cropped back. When ``layout`` is given the backlight is
    sampled at the LED centres.
    """
    cfg = params.config
    check_params(params)
    h, w = image.shape[:2]
    m = 2 ** cfg.stages
    ph, pw = (-h) % m, (-w) % m
    x = make_input(image, p_a)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="edge")

    tape = T.Tape()
    nodes = {k: T.Node(v, requires_grad=record, name=k) for k, v in params.tensors.items()}
    P = nodes
    eps = cfg.norm_eps

    inp = T.Node(x, name="input")
    y = T.conv2d(tape, inp, P["stem.conv.w"], P["stem.conv.b"])
    y = T.relu(tape, T.instance_norm(tape, y, P["stem.norm.gamma"], P["stem.norm.beta"], eps))
    skips = [y]
    for s in range(1, cfg.stages + 1):
        xin = skips[-1]
        a = T.conv2d(tape, xin, P[f"enc{s}.conv1.w"], P[f"enc{s}.conv1.b"], stride=2)
        a = T.relu(tape, T.instance_norm(tape, a, P[f"enc{s}.norm1.gamma"], P[f"enc{s}.norm1.beta"], eps))
        a = T.conv2d(tape, a, P[f"enc{s}.conv2.w"], P[f"enc{s}.conv2.b"])
        a = T.instance_norm(tape, a, P[f"enc{s}.norm2.gamma"], P[f"enc{s}.norm2.beta"], eps)
        sc = T.conv2d(tape, xin, P[f"enc{s}.proj.w"], P[f"enc{s}.proj.b"], stride=2)
        sc = T.instance_norm(tape, sc, P[f"enc{s}.proj_norm.gamma"], P[f"enc{s}.proj_norm.beta"], eps)
        skips.append(T.relu(tape, T.add(tape, a, sc)))
    y = skips[-1]
    for s in range(cfg.stages, 0, -1):
        skip = skips[s - 1]
        y = T.upsample(tape, y, skip.value.shape[1:])
        y = T.concat(tape, y, skip)
        y = T.conv2d(tape, y, P[f"dec{s}.conv1.w"], P[f"dec{s}.conv1.b"])
        y = T.relu(tape, T.instance_norm(tape, y, P[f"dec{s}.norm1.gamma"], P[f"dec{s}.norm1.beta"], eps))
        y = T.conv2d(tape, y, P[f"dec{s}.conv2.w"], P[f"dec{s}.conv2.b"])
    y = T.conv2d(tape, T.concat(tape, y, inp), P["head.w"], P["head.b"])
    out = T.sigmoid(tape, y)

    full = out.value[0, :h, :w]
    bl = None
    if layout is not None:
        if layout.shape != (h, w):
            raise ShapeMismatchError(f"layout panel {layout.shape} does not match image {(h, w)}")
        vals = full[layout.centers[:, 0], layout.centers[:, 1]]
        bl = Backlight(layout, vals)
    return ForwardResult(full, bl, tape, out, nodes, (h, w))


def backward(result: ForwardResult, upstream: np.ndarray) -> "OrderedDict[str, np.ndarray]":
    """Parameter gradients given ``d(loss)/d(map)`` at full resolution."""
    h, w = result.crop
    if upstream.shape != (h, w):
        raise ValueError(f"upstream gradient {upstream.shape} does not match map {(h, w)}")
    g = np.zeros(result.output.value.shape)
    g[0, :h, :w] = upstream
    result.tape.backward(result.output, g)
    return OrderedDict((k, n.grad if n.grad is not None else np.zeros_like(n.value))
                       for k, n in result.nodes.items())


def centers_upstream(layout: BacklightLayout, grad_values: np.ndarray) -> np.ndarray:
    """Scatter per-LED gradients onto the full-resolution map (adjoint of sampling)."""
    g = np.zeros(layout.shape)
    g[layout.centers[:, 0], layout.centers[:, 1]] = grad_values
    return g


# ----------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(params: NetParams, path, extra: dict | None = None) -> None:
    """Write an ``.npz`` holding every tensor plus a JSON metadata record."""
    meta = {"version": CHECKPOINT_VERSION, "net_config": asdict(params.config),
            "order": list(params.tensors), "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in params.tensors.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path, expected: NetConfig | None = None) -> NetParams:
    with np.load(Path(path)) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        tensors = OrderedDict((k, z[f"param/{k}"].copy()) for k in meta["order"])
    cfg = NetConfig(**meta["net_config"])
    params = NetParams(cfg, tensors)
    check_params(params)
    if expected is not None:
        check_params(params, expected)
    return params
