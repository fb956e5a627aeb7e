"""Large-kernel 2-D convolution through the FFT.

The transforms themselves are delegated to :mod:`scipy.fft`; this module
owns padding, kernel anchoring, boundary handling, kernel-spectrum caching
and the adjoint (correlation) needed for gradients.

Kernel anchor: the kernel element at ``((kh - 1) // 2, (kw - 1) // 2)`` is
the origin, so that an odd-sized symmetric PSF is centred on each source
pixel::

    out[i, j] = sum_{a, b} kernel[a, b] * image[i - a + ca, j - b + cb]

Values outside the image are zero (``"zero"``) or wrap around
(``"circular"``).
"""
from __future__ import annotations

import hashlib
import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

BOUNDARIES = ("zero", "circular")

# Imaginary residue tolerated by ifft2, relative to the output magnitude.
IMAG_TOL = 1e-6


@dataclass(frozen=True)
class Spectrum:
    """Full complex 2-D DFT (unnormalised forward transform)."""

    data: np.ndarray

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def fft2(image: np.ndarray, shape: tuple[int, int] | None = None) -> Spectrum:
    """Forward DFT of a real raster, zero-padded to ``shape`` if given."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 1:
        raise ValueError("fft2 expects a non-empty 2-D raster")
    return Spectrum(sfft.fft2(image, s=shape))


def ifft2(spectrum: Spectrum) -> np.ndarray:
    """Inverse DFT returning the real part.

    Raises ``ValueError`` if the imaginary residue exceeds ``IMAG_TOL`` of the
    output magnitude, which indicates a spectrum that is not conjugate
    symmetric (usually a layout bug upstream).
    """
    out = sfft.ifft2(spectrum.data)
    scale = max(np.abs(out.real).max(), np.finfo(float).tiny)
    residue = np.abs(out.imag).max()
    if residue > IMAG_TOL * scale:
        raise ValueError(f"imaginary residue {residue:.3g} exceeds tolerance (scale {scale:.3g})")
    return out.real


def padded_shape(image_shape, kernel_shape, boundary: str = "zero") -> tuple[int, int]:
    """Transform size used by :func:`conv2_large` for the given operands."""
    if boundary == "circular":
        return tuple(image_shape)
    if boundary != "zero":
        raise ValueError(f"unknown boundary {boundary!r}")
    return (sfft.next_fast_len(image_shape[0] + kernel_shape[0] - 1, real=True),
            sfft.next_fast_len(image_shape[1] + kernel_shape[1] - 1, real=True))


def _fold_kernel(kernel: np.ndarray, shape) -> np.ndarray:
    """Place the kernel on a ``shape`` torus with its anchor at (0, 0)."""
    kh, kw = kernel.shape
    ca, cb = (kh - 1) // 2, (kw - 1) // 2
    rows = (np.arange(kh) - ca) % shape[0]
    cols = (np.arange(kw) - cb) % shape[1]
    out = np.zeros(shape)
    np.add.at(out, (rows[:, None], cols[None, :]), kernel)
    return out


def _kernel_spectrum(kernel, shape, boundary):
    if boundary == "circular":
        return sfft.rfft2(_fold_kernel(kernel, shape))
    return sfft.rfft2(kernel, s=shape)


class KernelCache:
    """Thread-safe LRU of kernel spectra keyed by content hash and padded size."""

    def __init__(self, maxsize: int = 8):
        self.maxsize = maxsize
        self._entries: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    @staticmethod
    def key(kernel: np.ndarray, shape, boundary: str):
        digest = hashlib.blake2b(np.ascontiguousarray(kernel).tobytes(), digest_size=16).hexdigest()
        return digest, kernel.shape, tuple(shape), boundary

    def get(self, kernel: np.ndarray, shape, boundary: str) -> np.ndarray:
        key = self.key(kernel, shape, boundary)
        with self._lock:
            hit = self._entries.get(key)
            if hit is not None:
                self._entries.move_to_end(key)
                return hit
        spec = _kernel_spectrum(kernel, shape, boundary)
        spec.setflags(write=False)
        with self._lock:
            self._entries[key] = spec
            self._entries.move_to_end(key)
            while len(self._entries) > self.maxsize:
                self._entries.popitem(last=False)
        return spec

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()

    def __len__(self) -> int:
        return len(self._entries)


kernel_cache = KernelCache()


def _check(image, kernel):
    image = np.asarray(image, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if image.ndim != 2 or kernel.ndim != 2:
        raise ValueError("conv2_large expects 2-D rasters")
    if min(image.shape) < 1 or min(kernel.shape) < 1:
        raise ValueError("empty raster")
    if not (np.all(np.isfinite(image)) and np.all(np.isfinite(kernel))):
        raise ValueError("non-finite input to conv2_large")
    return image, kernel


def conv2_large(image, kernel, boundary: str = "zero", cache: KernelCache | None = kernel_cache) -> np.ndarray:
    """Convolve ``image`` with ``kernel``; the output has the image's shape.

    Parameters
    ----------
    image, kernel : 2-D arrays
        Finite real rasters. The kernel may be larger than the image.
    boundary : {"zero", "circular"}
        Zero padding, or periodic wraparound over the image extent.
    cache : KernelCache or None
        Where to look up / store the kernel spectrum.
    """
    image, kernel = _check(image, kernel)
    h, w = image.shape
    shape = padded_shape(image.shape, kernel.shape, boundary)
    kspec = cache.get(kernel, shape, boundary) if cache is not None else _kernel_spectrum(kernel, shape, boundary)
    full = sfft.irfft2(sfft.rfft2(image, s=shape) * kspec, s=shape)
    if boundary == "circular":
        return full
    ca, cb = (kernel.shape[0] - 1) // 2, (kernel.shape[1] - 1) // 2
    return full[ca:ca + h, cb:cb + w].copy()


def corr2_large(grad, kernel, boundary: str = "zero", cache: KernelCache | None = kernel_cache) -> np.ndarray:
    """Adjoint of :func:`conv2_large` with respect to its image argument.

    For any ``x`` and ``y`` of the image's shape,
    ``sum(conv2_large(x, k) * y) == sum(x * corr2_large(y, k))``.
    """
    grad, kernel = _check(grad, kernel)
    h, w = grad.shape
    shape = padded_shape(grad.shape, kernel.shape, boundary)
    kspec = cache.get(kernel, shape, boundary) if cache is not None else _kernel_spectrum(kernel, shape, boundary)
    if boundary == "circular":
        return sfft.irfft2(sfft.rfft2(grad) * np.conj(kspec), s=shape)
    ca, cb = (kernel.shape[0] - 1) // 2, (kernel.shape[1] - 1) // 2
    placed = np.zeros(shape)
    placed[ca:ca + h, cb:cb + w] = grad
    return sfft.irfft2(sfft.rfft2(placed) * np.conj(kspec), s=shape)[:h, :w].copy()
