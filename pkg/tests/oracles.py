"""Independent reference implementations used only by the tests.

Everything here is written with explicit loops or textbook formulas and does
not call into the code under test.
"""
import numpy as np


def conv_direct(image, kernel, boundary="zero"):
    """Sliding-window 2-D convolution, output the size of ``image``.

    The kernel is anchored at ``((kh - 1) // 2, (kw - 1) // 2)``. Outside the
    image it is zero, or wraps around for ``boundary="circular"``.
    """
    image = np.asarray(image, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    h, w = image.shape
    kh, kw = kernel.shape
    ay, ax = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for u in range(kh):
                for v in range(kw):
                    y, x = i - (u - ay), j - (v - ax)
                    if boundary == "circular":
                        acc += kernel[u, v] * image[y % h, x % w]
                    elif 0 <= y < h and 0 <= x < w:
                        acc += kernel[u, v] * image[y, x]
            out[i, j] = acc
    return out


def conv_direct_fast(image, kernel, boundary="zero"):
    """Same as :func:`conv_direct`, vectorised over pixels (shift and add)."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    kh, kw = kernel.shape
    ay, ax = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((h, w))
    for u in range(kh):
        for v in range(kw):
            dy, dx = u - ay, v - ax
            if boundary == "circular":
                out += kernel[u, v] * np.roll(image, (dy, dx), axis=(0, 1))
                continue
            shifted = np.zeros((h, w))
            ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
            xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
            if ys.start < ys.stop and xs.start < xs.stop:
                shifted[yd, xd] = image[ys, xs]
            out += kernel[u, v] * shifted
    return out


def gaussian_1d(size, sigma):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def ssim_brute(x, y, data_range, win=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM and contrast-structure over valid windows, one window at a time."""
    g = gaussian_1d(win, sigma)
    w2 = np.outer(g, g)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    h, w = x.shape
    s_map, cs_map = [], []
    for i in range(h - win + 1):
        for j in range(w - win + 1):
            px, py = x[i:i + win, j:j + win], y[i:i + win, j:j + win]
            mx, my = np.sum(w2 * px), np.sum(w2 * py)
            vx = np.sum(w2 * px * px) - mx * mx
            vy = np.sum(w2 * py * py) - my * my
            cxy = np.sum(w2 * px * py) - mx * my
            cs = (2 * cxy + c2) / (vx + vy + c2)
            s_map.append((2 * mx * my + c1) / (mx * mx + my * my + c1) * cs)
            cs_map.append(cs)
    return float(np.mean(s_map)), float(np.mean(cs_map))


MS_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])


def _pool_brute(x):
    """2x2 average with zero padding one pixel before an odd axis, divisor always 4."""
    h, w = x.shape
    oy, ox = h % 2, w % 2
    out = np.zeros(((h + 1) // 2, (w + 1) // 2))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            acc = 0.0
            for u in (0, 1):
                for v in (0, 1):
                    y, xx = 2 * i + u - oy, 2 * j + v - ox
                    if 0 <= y < h and 0 <= xx < w:
                        acc += x[y, xx]
            out[i, j] = acc / 4
    return out


def ms_ssim_brute(x, y, data_range, scales=5):
    weights = MS_WEIGHTS if scales == 5 else MS_WEIGHTS[:scales] / MS_WEIGHTS[:scales].sum()
    vals = []
    for s in range(scales):
        ssim, cs = ssim_brute(x, y, data_range)
        vals.append(max(ssim if s == scales - 1 else cs, 0.0))
        if s < scales - 1:
            x, y = _pool_brute(x), _pool_brute(y)
    return float(np.prod(np.array(vals) ** weights))


def rgbe_encode_reference(rgb):
    """Per-pixel RGBE encoding with ``math.frexp`` (Ward's reference rule)."""
    import math
    h, w, _ = rgb.shape
    out = np.zeros((h, w, 4), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            v = max(rgb[i, j])
            if v < 1e-32:
                continue
            m, e = math.frexp(v)
            scale = m * 256.0 / v
            out[i, j, :3] = [int(c * scale) for c in rgb[i, j]]
            out[i, j, 3] = e + 128
    return out


def rgbe_decode_reference(rgbe):
    import math
    h, w, _ = rgbe.shape
    out = np.zeros((h, w, 3))
    for i in range(h):
        for j in range(w):
            if rgbe[i, j, 3] == 0:
                continue
            f = math.ldexp(1.0, int(rgbe[i, j, 3]) - (128 + 8))
            out[i, j] = [float(c) * f for c in rgbe[i, j, :3]]
    return out


def central_difference(f, x, h):
    """Central-difference gradient of a scalar function of a 1-D vector."""
    g = np.zeros_like(x)
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        g[k] = (f(xp) - f(xm)) / (2 * h)
    return g
