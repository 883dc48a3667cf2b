"""8-bit raster images, binary PPM/PGM IO, and bilinear resampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PPMError(ValueError):
    """Malformed PPM/PGM input. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True, eq=False)
class Image:
    """Row-major 8-bit raster; ``pixels`` has shape (height, width, channels)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image must be (h, w, c) with h, w >= 1, got {px.shape}")
        if px.shape[2] not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {px.shape[2]}")
        if px.dtype != np.uint8:
            if px.size and (px.min() < 0 or px.max() > 255):
                raise ValueError("samples must lie in [0, 255]")
            px = px.astype(np.uint8)
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_bytes(cls, height: int, width: int, channels: int, data: bytes) -> "Image":
        expected = height * width * channels
        if len(data) != expected:
            raise ValueError(f"expected {expected} samples, got {len(data)}")
        arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width, channels)
        return cls(arr)

    @classmethod
    def filled(cls, height: int, width: int, value, channels: int = 3) -> "Image":
        return cls(np.full((height, width, channels), value, dtype=np.uint8))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def data(self) -> bytes:
        return self.pixels.tobytes()

    def crop(self, top: int, left: int, height: int, width: int) -> "Image":
        if top < 0 or left < 0 or top + height > self.height or left + width > self.width:
            raise ValueError(
                f"crop ({top}, {left}, {height}, {width}) outside {self.height}x{self.width}"
            )
        return Image(self.pixels[top:top + height, left:left + width])

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )

    def __hash__(self):
        return hash((self.pixels.shape, self.pixels.tobytes()))

    def __repr__(self):
        return f"Image(h={self.height}, w={self.width}, c={self.channels})"


_WHITESPACE = b" \t\n\r\v\f"


def _read_header_int(buf: bytes, pos: int, what: str) -> tuple[int, int, int]:
    # skip whitespace and '#' comments up to the next token
    n = len(buf)
    while pos < n:
        if buf[pos] in _WHITESPACE:
            pos += 1
        elif buf[pos] == ord("#"):
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos] in b"0123456789":
        pos += 1
    if pos == start:
        raise PPMError(f"expected {what}", start)
    if pos >= n or buf[pos] not in _WHITESPACE:
        raise PPMError(f"malformed {what}", pos)
    return int(buf[start:pos]), start, pos


def read_ppm(buf: bytes) -> Image:
    """Parse a binary P6 (RGB) or P5 (gray) file with maxval 255."""
    buf = bytes(buf)
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise PPMError("expected magic P5 or P6", 0)
    channels = 3 if buf[:2] == b"P6" else 1
    pos = 2
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise PPMError("malformed magic", pos)
    width, width_pos, pos = _read_header_int(buf, pos, "width")
    height, _, pos = _read_header_int(buf, pos, "height")
    maxval, maxval_pos, pos = _read_header_int(buf, pos, "maxval")
    if width < 1 or height < 1:
        raise PPMError(f"invalid dimensions {width}x{height}", width_pos)
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval}", maxval_pos)
    pos += 1  # exactly one whitespace byte before the raster
    need = width * height * channels
    have = len(buf) - pos
    if have < need:
        raise PPMError(f"truncated payload: need {need} bytes, have {have}", len(buf))
    if have > need:
        raise PPMError(f"{have - need} trailing bytes after payload", pos + need)
    return Image.from_bytes(height, width, channels, buf[pos:pos + need])


def write_ppm(img: Image) -> bytes:
    magic = b"P6" if img.channels == 3 else b"P5"
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    return header + img.data


def _axis_taps(n_in: int, n_out: int):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to the edge
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: Image, out_h: int, out_w: int) -> Image:
    """Half-pixel-centred bilinear resize, no antialiasing.

    Each channel is interpolated independently; results are rounded half away
    from zero and clamped to [0, 255]. Resizing to the same size is the identity.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    if (out_h, out_w) == (img.height, img.width):
        return img
    y0, y1, ty = _axis_taps(img.height, out_h)
    x0, x1, tx = _axis_taps(img.width, out_w)
    rows0 = np.take(img.pixels, y0, axis=0)
    rows1 = np.take(img.pixels, y1, axis=0)
    tx = tx[None, :, None]

    def lerp_x(rows):
        left = np.take(rows, x0, axis=1).astype(np.float64)
        span = np.take(rows, x1, axis=1).astype(np.float64)
        span -= left
        span *= tx
        span += left
        return span

    out = lerp_x(rows0)
    bot = lerp_x(rows1)
    bot -= out
    bot *= ty[:, None, None]
    out += bot
    out += 0.5
    np.floor(out, out=out)
    return Image(np.clip(out, 0, 255).astype(np.uint8))
