"""Radiance RGBE and PFM readers/writers plus luminance extraction.

Images are held as float64 ``(height, width, channels)`` arrays with a
top-left origin, regardless of the on-disk row order.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

REC709 = np.array([0.2126, 0.7152, 0.0722])

# Header variable used to round-trip absolute calibration through .hdr files.
_NITS_KEY = "NITS_PER_UNIT"


class HdrDecodeError(ValueError):
    """Base class for HDR/PFM decoding failures."""


class MalformedHeaderError(HdrDecodeError):
    pass


class TruncatedDataError(HdrDecodeError):
    pass


class UnsupportedOrientationError(HdrDecodeError):
    pass


@dataclass(frozen=True)
class HdrImage:
    """Linear-radiance raster.

    ``data`` has shape ``(height, width, channels)`` with ``channels`` 3 for
    colour images and 1 for single-channel rasters such as PSFs loaded from
    grayscale PFM. ``nits_per_unit`` converts a value of 1.0 to cd/m^2 when
    ``calibrated`` is set.
    """

    data: np.ndarray
    nits_per_unit: float = 1.0
    calibrated: bool = False

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W, 3) or (H, W, 1) data, got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if np.any(arr < 0):
            raise ValueError("image contains negative values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def scaled(self, factor: float) -> "HdrImage":
        return HdrImage(self.data * factor, self.nits_per_unit, self.calibrated)


def luminance(image: HdrImage) -> np.ndarray:
    """Rec. 709 luminance plane of ``image`` as a float64 ``(H, W)`` array."""
    if image.channels == 1:
        return image.data[:, :, 0].copy()
    return image.data @ REC709


# ----------------------------------------------------------------------------
# Radiance RGBE

def _float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    v = rgb.max(axis=-1)
    mant, exp = np.frexp(v)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    ok = v >= 1e-32
    scale = np.zeros_like(v)
    scale[ok] = mant[ok] * 256.0 / v[ok]
    out[..., :3] = np.where(ok[..., None], np.floor(rgb * scale[..., None]), 0).astype(np.uint8)
    out[..., 3] = np.where(ok, exp + 128, 0).astype(np.uint8)
    return out


def _rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    e = rgbe[..., 3].astype(np.int32)
    f = np.where(e > 0, np.ldexp(1.0, e - (128 + 8)), 0.0)
    return rgbe[..., :3].astype(np.float64) * f[..., None]


def _read_header(buf: bytes) -> tuple[dict, str, int]:
    """Parse the text header; returns (variables, resolution line, data offset)."""
    if not (buf.startswith(b"#?RADIANCE") or buf.startswith(b"#?RGBE")):
        raise MalformedHeaderError("missing #?RADIANCE / #?RGBE magic")
    end = buf.find(b"\n\n")
    if end < 0:
        raise MalformedHeaderError("header not terminated by a blank line")
    variables = {}
    for line in buf[:end].decode("latin-1").splitlines()[1:]:
        if "=" in line and not line.startswith("#"):
            key, _, value = line.partition("=")
            variables[key.strip()] = value.strip()
    res_end = buf.find(b"\n", end + 2)
    if res_end < 0:
        raise MalformedHeaderError("missing resolution line")
    resolution = buf[end + 2:res_end].decode("latin-1").strip()
    fmt = variables.get("FORMAT", "32-bit_rle_rgbe")
    if fmt != "32-bit_rle_rgbe":
        raise MalformedHeaderError(f"unsupported FORMAT {fmt!r}")
    return variables, resolution, res_end + 1


def _parse_resolution(line: str) -> tuple[int, int, bool, bool]:
    """Return (height, width, flip_rows, flip_cols)."""
    m = re.fullmatch(r"([+-])([XY])\s+(\d+)\s+([+-])([XY])\s+(\d+)", line)
    if m is None:
        raise MalformedHeaderError(f"bad resolution line {line!r}")
    s1, a1, n1, s2, a2, n2 = m.groups()
    if a1 != "Y" or a2 != "X":
        raise UnsupportedOrientationError(f"transposed orientation {line!r} not supported")
    height, width = int(n1), int(n2)
    if height < 1 or width < 1:
        raise MalformedHeaderError(f"bad resolution line {line!r}")
    return height, width, s1 == "+", s2 == "-"


def _decode_scanline(buf: memoryview, pos: int, width: int) -> tuple[np.ndarray, int]:
    n = len(buf)
    if width < 8 or width > 0x7FFF or pos + 4 > n or buf[pos] != 2 or buf[pos + 1] != 2 or buf[pos + 2] & 0x80:
        return _decode_flat_scanline(buf, pos, width)
    if (buf[pos + 2] << 8 | buf[pos + 3]) != width:
        raise HdrDecodeError("RLE scanline width does not match header")
    pos += 4
    line = np.empty((4, width), dtype=np.uint8)
    for ch in range(4):
        x = 0
        row = line[ch]
        while x < width:
            if pos >= n:
                raise TruncatedDataError("truncated RLE scanline")
            count = buf[pos]
            if count > 128:
                count -= 128
                if pos + 1 >= n:
                    raise TruncatedDataError("truncated RLE run")
                if x + count > width:
                    raise HdrDecodeError("RLE run overflows scanline")
                row[x:x + count] = buf[pos + 1]
                pos += 2
            else:
                if count == 0 or x + count > width:
                    raise HdrDecodeError("bad RLE literal count")
                if pos + 1 + count > n:
                    raise TruncatedDataError("truncated RLE literal")
                row[x:x + count] = np.frombuffer(buf[pos + 1:pos + 1 + count], dtype=np.uint8)
                pos += 1 + count
            x += count
    return line.T, pos


def _decode_flat_scanline(buf: memoryview, pos: int, width: int) -> tuple[np.ndarray, int]:
    # Flat pixels, with the legacy (1,1,1,n) repeat encoding.
    out = np.empty((width, 4), dtype=np.uint8)
    x = 0
    shift = 0
    n = len(buf)
    while x < width:
        if pos + 4 > n:
            raise TruncatedDataError("truncated flat scanline")
        px = buf[pos:pos + 4]
        pos += 4
        if px[0] == 1 and px[1] == 1 and px[2] == 1:
            if x == 0:
                raise HdrDecodeError("legacy run at scanline start")
            count = px[3] << shift
            if x + count > width:
                raise HdrDecodeError("legacy run overflows scanline")
            out[x:x + count] = out[x - 1]
            x += count
            shift += 8
        else:
            out[x] = np.frombuffer(px, dtype=np.uint8)
            x += 1
            shift = 0
    return out, pos


def read_hdr(path, nits_per_unit: float | None = None) -> HdrImage:
    """Decode a Radiance RGBE file.

    Both run-length-encoded and flat scanlines are accepted. If the header
    carries ``NITS_PER_UNIT=`` (as written by :func:`write_hdr`) or
    ``nits_per_unit`` is given, the image is marked calibrated.
    """
    buf = Path(path).read_bytes()
    variables, resolution, pos = _read_header(buf)
    height, width, flip_rows, flip_cols = _parse_resolution(resolution)
    view = memoryview(buf)

    if len(buf) - pos == height * width * 4 and not (width >= 8 and buf[pos:pos + 2] == b"\x02\x02"):
        # Fast path for uncompressed files.
        rgbe = np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(height, width, 4)
        if np.any(np.all(rgbe[..., :3] == 1, axis=-1)):
            rgbe = None
    else:
        rgbe = None
    if rgbe is None:
        rgbe = np.empty((height, width, 4), dtype=np.uint8)
        for y in range(height):
            rgbe[y], pos = _decode_scanline(view, pos, width)

    data = _rgbe_to_float(rgbe)
    if flip_rows:
        data = data[::-1]
    if flip_cols:
        data = data[:, ::-1]

    if nits_per_unit is None and _NITS_KEY in variables:
        try:
            nits_per_unit = float(variables[_NITS_KEY])
        except ValueError as exc:
            raise MalformedHeaderError(f"bad {_NITS_KEY} value") from exc
    if nits_per_unit is None:
        return HdrImage(data)
    return HdrImage(data, nits_per_unit=nits_per_unit, calibrated=True)


def _rle_encode_channel(row: np.ndarray) -> bytes:
    out = bytearray()
    n = len(row)
    x = 0
    while x < n:
        # look for the next run of at least 4 equal bytes
        run_start = x
        run_len = 0
        while run_start < n:
            run_len = 1
            while run_start + run_len < n and run_len < 127 and row[run_start + run_len] == row[run_start]:
                run_len += 1
            if run_len >= 4:
                break
            run_start += run_len
        # literals before the run
        while x < run_start:
            count = min(128, run_start - x)
            out.append(count)
            out.extend(row[x:x + count].tobytes())
            x += count
        if run_start < n and run_len >= 4:
            out.append(128 + run_len)
            out.append(int(row[run_start]))
            x = run_start + run_len
    return bytes(out)


def write_hdr(image: HdrImage, path, rle: bool = True) -> None:
    """Write ``image`` as a Radiance RGBE file (-Y H +X W orientation)."""
    if image.channels != 3:
        raise ValueError("RGBE needs a three-channel image")
    rgbe = _float_to_rgbe(image.data)
    height, width = image.height, image.width
    header = "#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n"
    if image.calibrated:
        header += f"{_NITS_KEY}={image.nits_per_unit!r}\n"
    header += f"\n-Y {height} +X {width}\n"
    chunks = [header.encode("ascii")]
    if rle and 8 <= width <= 0x7FFF:
        marker = bytes([2, 2, width >> 8, width & 0xFF])
        for y in range(height):
            chunks.append(marker)
            for ch in range(4):
                chunks.append(_rle_encode_channel(rgbe[y, :, ch]))
    else:
        chunks.append(rgbe.tobytes())
    Path(path).write_bytes(b"".join(chunks))


# ----------------------------------------------------------------------------
# PFM

_PFM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")

def read_pfm(path) -> HdrImage:
    """Read a PFM file; ``PF`` gives three channels, ``Pf`` one."""
    buf = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        m = _PFM_TOKEN.match(buf, pos)
        if m is None:
            raise MalformedHeaderError("truncated PFM header")
        fields.append(m.group(1))
        pos = m.end()
    if pos >= len(buf) or buf[pos:pos + 1] not in (b"\n", b" ", b"\r", b"\t"):
        raise MalformedHeaderError("PFM header not terminated by whitespace")
    pos += 1
    ident, w, h, scale = fields
    if ident == b"PF":
        channels = 3
    elif ident == b"Pf":
        channels = 1
    else:
        raise MalformedHeaderError(f"unrecognised PFM identifier {ident!r}")
    try:
        width, height, scale = int(w), int(h), float(scale)
    except ValueError as exc:
        raise MalformedHeaderError("bad PFM dimensions or scale") from exc
    if width < 1 or height < 1 or scale == 0:
        raise MalformedHeaderError("bad PFM dimensions or scale")
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    count = width * height * channels
    if len(buf) - pos != count * 4:
        raise TruncatedDataError(
            f"PFM payload is {len(buf) - pos} bytes, expected {count * 4}")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    data = data.reshape(height, width, channels)[::-1]
    return HdrImage(data.astype(np.float64))


def write_pfm(image: HdrImage, path, little_endian: bool = True) -> None:
    """Write ``image`` as PFM. Values are stored as float32."""
    ident = b"PF" if image.channels == 3 else b"Pf"
    scale = -1.0 if little_endian else 1.0
    dtype = np.dtype("<f4") if little_endian else np.dtype(">f4")
    payload = np.ascontiguousarray(image.data[::-1], dtype=dtype).tobytes()
    header = ident + f"\n{image.width} {image.height}\n{scale}\n".encode("ascii")
    Path(path).write_bytes(header + payload)


RGBE_SUFFIXES = (".hdr", ".pic", ".rgbe")


def _suffix(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix != ".pfm" and suffix not in RGBE_SUFFIXES:
        raise ValueError(f"unsupported image type {suffix!r}; use .hdr, .pic, .rgbe or .pfm")
    return suffix


def read_image(path, **kwargs) -> HdrImage:
    """Dispatch on file suffix (.hdr / .pic / .rgbe or .pfm)."""
    if _suffix(path) == ".pfm":
        return read_pfm(path)
    return read_hdr(path, **kwargs)


def write_image(image: HdrImage, path) -> None:
    if _suffix(path) == ".pfm":
        write_pfm(image, path)
    else:
        write_hdr(image, path)
