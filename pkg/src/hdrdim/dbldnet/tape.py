"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Tensors are ``(channels, height, width)`` arrays (batch size one). Every
operation takes the :class:`Tape` it records onto, returns a new
:class:`Node`, and registers a closure mapping the output gradient to the
gradients of its inputs. :meth:`Tape.backward` replays the closures in
reverse recording order, which is a reverse topological order because a node
can only be consumed after it has been produced.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class TapeConsumedError(RuntimeError):
    pass


class Node:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.name or ''}{self.value.shape})"


class Tape:
    def __init__(self):
        self.records = []
        self.consumed = False

    def record(self, out, inputs, backward_fn, op):
        if self.consumed:
            raise TapeConsumedError("cannot record onto a tape after backward()")
        out.requires_grad = any(n.requires_grad for n in inputs)
        if out.requires_grad:
            self.records.append((out, inputs, backward_fn, op))
        return out

    def backward(self, out: Node, upstream: np.ndarray) -> None:
        """Accumulate ``d(loss)/d(node)`` into ``.grad`` of every upstream node."""
        if self.consumed:
            raise TapeConsumedError("tape has already been replayed")
        self.consumed = True
        if upstream.shape != out.value.shape:
            raise ValueError(f"upstream gradient {upstream.shape} does not match output {out.value.shape}")
        out.grad = np.array(upstream, dtype=np.float64)
        for node, inputs, fn, _ in reversed(self.records):
            if node.grad is None:
                continue
            for inp, g in zip(inputs, fn(node.grad)):
                if g is None or not inp.requires_grad:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g
            # intermediate gradients are not needed once propagated
            if node is not out:
                node.grad = None
        self.records.clear()

    @property
    def ops(self):
        return [rec[3] for rec in self.records]


# ----------------------------------------------------------------------------
# Operations


def _im2col(xp, k, stride, ho, wo):
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (C, Ho, Wo, k, k) -> (C, k, k, Ho, Wo) -> (C*k*k, Ho*Wo)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(-1, ho * wo)


def conv2d(tape: Tape, x: Node, w: Node, b: Node | None, stride: int = 1) -> Node:
    """Cross-correlation with zero padding ``k // 2`` (odd square kernels)."""
    c, h, wd = x.value.shape
    o, ci, k, k2 = w.value.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ValueError(f"conv weight {w.value.shape} incompatible with input {x.value.shape}")
    p = k // 2
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    if k == 1 and stride == 1:
        cols = x.value.reshape(c, -1)
    else:
        xp = np.pad(x.value, ((0, 0), (p, p), (p, p))) if p else x.value
        cols = _im2col(xp, k, stride, ho, wo)
    wm = w.value.reshape(o, -1)
    y = wm @ cols
    if b is not None:
        y += b.value[:, None]
    out = Node(y.reshape(o, ho, wo))

    def backward(g):
        gm = g.reshape(o, -1)
        gw = (gm @ cols.T).reshape(w.value.shape) if w.requires_grad else None
        gb = gm.sum(axis=1) if b is not None and b.requires_grad else None
        if not x.requires_grad:
            return None, gw, gb
        gcols = wm.T @ gm
        if k == 1 and stride == 1:
            return gcols.reshape(c, h, wd), gw, gb
        gcols = gcols.reshape(c, k, k, ho, wo)
        gxp = np.zeros((c, h + 2 * p, wd + 2 * p))
        for a in range(k):
            for bb in range(k):
                gxp[:, a:a + stride * (ho - 1) + 1:stride, bb:bb + stride * (wo - 1) + 1:stride] += gcols[:, a, bb]
        return gxp[:, p:p + h, p:p + wd], gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    fn = backward if b is not None else (lambda g: backward(g)[:2])
    return tape.record(out, inputs, fn, f"conv{k}x{k}/s{stride}")


def instance_norm(tape: Tape, x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    """Per-channel standardisation over space, then a learned affine map."""
    v = x.value
    n = v.shape[1] * v.shape[2]
    mu = v.mean(axis=(1, 2), keepdims=True)
    xc = v - mu
    var = np.mean(xc * xc, axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Node(gamma.value[:, None, None] * xhat + beta.value[:, None, None])

    def backward(g):
        ggamma = np.sum(g * xhat, axis=(1, 2))
        gbeta = g.sum(axis=(1, 2))
        gxhat = g * gamma.value[:, None, None]
        gx = inv / n * (n * gxhat - gxhat.sum(axis=(1, 2), keepdims=True)
                        - xhat * np.sum(gxhat * xhat, axis=(1, 2), keepdims=True))
        return gx, ggamma, gbeta

    return tape.record(out, (x, gamma, beta), backward, "instance_norm")


def normalize_only(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Pre-affine instance-normalised values (used to probe statistics)."""
    mu = x.mean(axis=(1, 2), keepdims=True)
    var = x.var(axis=(1, 2), keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def relu(tape: Tape, x: Node) -> Node:
    mask = x.value > 0
    out = Node(x.value * mask)
    return tape.record(out, (x,), lambda g: (g * mask,), "relu")


def sigmoid(tape: Tape, x: Node) -> Node:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    out = Node(s)
    return tape.record(out, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def add(tape: Tape, a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch {a.value.shape} vs {b.value.shape}")
    return tape.record(Node(a.value + b.value), (a, b), lambda g: (g, g), "add")


def concat(tape: Tape, *xs: Node) -> Node:
    sizes = [x.value.shape[0] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    out = Node(np.concatenate([x.value for x in xs], axis=0))
    return tape.record(out, xs, lambda g: tuple(np.split(g, splits, axis=0)), "concat")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix with half-pixel centres and edge clamping."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def upsample(tape: Tape, x: Node, size: tuple[int, int]) -> Node:
    """Bilinear resize of every channel to ``size``."""
    mh = bilinear_matrix(x.value.shape[1], size[0])
    mw = bilinear_matrix(x.value.shape[2], size[1])
    out = Node(mh @ x.value @ mw.T)
    return tape.record(out, (x,), lambda g: (mh.T @ g @ mw,), "upsample")
