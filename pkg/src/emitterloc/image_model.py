"""Image and geometry types plus 16-bit binary PGM I/O.

Coordinate convention used throughout the package: ``x`` is the column index
(increasing rightward), ``y`` is the row index (increasing downward) and pixel
centres sit on integer coordinates with ``(0, 0)`` at the top-left pixel.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import BoundsError, FormatError, IoError, ParameterError, RangeError, UnsupportedError

PGM_MAXVAL = 65535


@dataclass(frozen=True)
class Point2D:
    x: float
    y: float
    unit: str = "px"

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ParameterError(f"non-finite point ({self.x}, {self.y})")

    def __iter__(self):
        yield self.x
        yield self.y


@dataclass(frozen=True)
class PixelScale:
    nanometers_per_pixel: float

    def __post_init__(self):
        v = self.nanometers_per_pixel
        if not (math.isfinite(v) and v > 0):
            raise ParameterError(f"pixel scale must be finite and > 0, got {v}")


@dataclass(frozen=True)
class RegionOfInterest:
    """Axis-aligned pixel window; ``(x0, y0)`` is the inclusive top-left pixel."""

    x0: int
    y0: int
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ParameterError(f"ROI must be at least 1x1, got {self.width}x{self.height}")

    @property
    def x1(self) -> int:
        return self.x0 + self.width

    @property
    def y1(self) -> int:
        return self.y0 + self.height

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def inside(self, width: int, height: int) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= width and self.y1 <= height

    def contains(self, other: "RegionOfInterest") -> bool:
        return (
            other.x0 >= self.x0 and other.y0 >= self.y0
            and other.x1 <= self.x1 and other.y1 <= self.y1
        )

    def contains_point(self, x: float, y: float) -> bool:
        # pixel footprints extend half a pixel past the outer centres
        return self.x0 - 0.5 <= x <= self.x1 - 0.5 and self.y0 - 0.5 <= y <= self.y1 - 0.5

    def offset(self, other: "RegionOfInterest") -> "RegionOfInterest":
        """Express ``other`` (given relative to this ROI) in parent coordinates."""
        return RegionOfInterest(self.x0 + other.x0, self.y0 + other.y0, other.width, other.height)

    @classmethod
    def centered(cls, cx: int, cy: int, half_w: int, half_h: int | None = None) -> "RegionOfInterest":
        half_h = half_w if half_h is None else half_h
        return cls(cx - half_w, cy - half_h, 2 * half_w + 1, 2 * half_h + 1)

    def clip(self, bounds: "RegionOfInterest") -> "RegionOfInterest":
        x0 = max(self.x0, bounds.x0)
        y0 = max(self.y0, bounds.y0)
        x1 = min(self.x1, bounds.x1)
        y1 = min(self.y1, bounds.y1)
        if x1 <= x0 or y1 <= y0:
            raise BoundsError(f"{self} does not overlap {bounds}")
        return RegionOfInterest(x0, y0, x1 - x0, y1 - y0)


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable 2D grid of photon counts.

    ``counts`` is indexed ``[row, column]``.  Filtered images (band-pass
    output) are flagged ``signed=True`` and may hold negative values.
    """

    counts: np.ndarray
    pixel_scale: PixelScale | None = None
    signed: bool = False

    def __post_init__(self):
        arr = np.array(self.counts, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ParameterError(f"image must be a non-empty 2D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ParameterError("image contains non-finite values")
        if not self.signed and np.any(arr < 0):
            raise ParameterError("photon counts must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "counts", arr)

    @property
    def width(self) -> int:
        return self.counts.shape[1]

    @property
    def height(self) -> int:
        return self.counts.shape[0]

    @property
    def full_roi(self) -> RegionOfInterest:
        return RegionOfInterest(0, 0, self.width, self.height)

    @property
    def center(self) -> tuple[float, float]:
        return (self.width - 1) / 2.0, (self.height - 1) / 2.0

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return (
            self.signed == other.signed
            and self.pixel_scale == other.pixel_scale
            and np.array_equal(self.counts, other.counts)
        )

    __hash__ = None


def crop(image: Image, roi: RegionOfInterest) -> Image:
    if not roi.inside(image.width, image.height):
        raise BoundsError(f"{roi} outside {image.width}x{image.height} image")
    return Image(image.counts[roi.slices], image.pixel_scale, image.signed)


# --- PGM -------------------------------------------------------------------

_WS = b" \t\n\r\v\f"


def _read_header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c in _WS:
            pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos:pos + 1] not in _WS and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header")
    return buf[start:pos], pos


def load_pgm(path) -> Image:
    """Read a binary (P5) PGM without any rescaling of sample values."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    magic, pos = _read_header_token(buf, 0)
    if magic != b"P5":
        raise FormatError(f"expected binary PGM magic 'P5', got {magic[:8]!r}")
    fields = []
    for _ in range(3):
        tok, pos = _read_header_token(buf, pos)
        if not re.fullmatch(rb"[0-9]+", tok):
            raise FormatError(f"non-numeric PGM header field {tok[:16]!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"invalid PGM dimensions {width}x{height}")
    if maxval < 1:
        raise FormatError(f"invalid PGM maxval {maxval}")
    if maxval > PGM_MAXVAL:
        raise UnsupportedError(f"PGM maxval {maxval} exceeds 65535")
    if pos >= len(buf) or buf[pos:pos + 1] not in _WS:
        raise FormatError("missing whitespace after PGM header")
    pos += 1

    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    nbytes = width * height * dtype.itemsize
    payload = buf[pos:pos + nbytes]
    if len(payload) < nbytes:
        raise FormatError(f"truncated PGM payload: expected {nbytes} bytes, got {len(payload)}")
    samples = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return Image(samples.astype(np.float64))


def save_pgm(image: Image, path, clamp: bool = False) -> None:
    """Write ``image`` as a P5 PGM with maxval 65535 and big-endian samples.

    Counts are rounded to the nearest integer.  Values outside ``[0, 65535]``
    raise :class:`RangeError` unless ``clamp`` is set.
    """
    values = np.rint(image.counts)
    if clamp:
        values = np.clip(values, 0, PGM_MAXVAL)
    elif values.min() < 0 or values.max() > PGM_MAXVAL:
        raise RangeError(
            f"counts span [{values.min()}, {values.max()}], outside [0, {PGM_MAXVAL}]"
        )
    header = f"P5\n{image.width} {image.height}\n{PGM_MAXVAL}\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(values.astype(">u2").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# --- rotation --------------------------------------------------------------

def rotate_points(points, angle_deg: float, center) -> np.ndarray:
    """Rotate ``(N, 2)`` xy points by ``angle_deg`` about ``center``.

    Positive angles turn +x towards +y, i.e. clockwise on screen.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    d = pts - np.asarray(center, dtype=np.float64)
    out = np.empty_like(d)
    out[:, 0] = c * d[:, 0] - s * d[:, 1]
    out[:, 1] = s * d[:, 0] + c * d[:, 1]
    return out + np.asarray(center, dtype=np.float64)


def rotated_window(counts: np.ndarray, angle_deg: float, center, roi: RegionOfInterest) -> np.ndarray:
    """Bilinearly sample ``roi`` of ``counts`` after rotating it by ``angle_deg`` about ``center``.

    Only the requested window is resampled, which keeps repeated
    rotate-and-register passes cheap on full camera frames.
    """
    ys, xs = np.mgrid[roi.y0:roi.y1, roi.x0:roi.x1]
    dst = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    src = rotate_points(dst, -angle_deg, center)
    out = ndimage.map_coordinates(
        np.asarray(counts, dtype=np.float64), [src[:, 1], src[:, 0]], order=1, mode="nearest"
    )
    return out.reshape(roi.height, roi.width)


def rotate_image(image: Image, angle_deg: float, center=None) -> Image:
    """Rotate about ``center`` (default: image centre) with bilinear interpolation."""
    if center is None:
        center = image.center
    if angle_deg == 0.0:
        return image
    out = rotated_window(image.counts, angle_deg, center, image.full_roi)
    if not image.signed:
        out = np.maximum(out, 0.0)
    return Image(out, image.pixel_scale, image.signed)
