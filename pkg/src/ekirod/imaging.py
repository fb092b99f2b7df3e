"""Imaging chain: rasterise a centerline, grey-convert, threshold, distance map.

The chain turns a rod centerline into the observation vector

    render -> to_grey -> threshold -> distance_transform -> flatten,

with every stage deterministic. Distance transforms are exact, not chamfer
approximations: the euclidean variant runs the two-pass lower-envelope
algorithm on squared distances, the manhattan variant runs two full-grid
sweeps (which are exact for the L1 metric on an unobstructed grid). Both
inner loops are JIT-compiled.

Pixel conventions: row-major arrays indexed ``[row, col]`` with row 0 at the
top; flattening is row-major. Binary images store black (the rendered rod)
as 0 and white as 255; distances are measured to the nearest black pixel in
pixel units (unit grid spacing).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from numba import njit

from .errors import (
    ConfigurationError,
    DegenerateImageError,
    InputOutputError,
    ParseError,
)

# Exact-arithmetic infinity for the squared-distance envelope: large enough
# to dominate any squared pixel distance, small enough that sums with
# squared offsets stay exactly representable in float64.
_EDT_INF = 1.0e12

_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class RgbImage:
    """8-bit RGB raster; ``clipped`` records a stroke leaving the frame."""

    pixels: npt.NDArray[np.uint8]
    clipped: bool = False

    def __post_init__(self) -> None:
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise ValueError(f"RGB pixels must be uint8 (h, w, 3), got {p.shape} {p.dtype}")
        object.__setattr__(self, "pixels", p)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class GreyImage:
    """8-bit single-channel raster."""

    pixels: npt.NDArray[np.uint8]

    def __post_init__(self) -> None:
        p = np.asarray(self.pixels)
        if p.ndim != 2 or p.dtype != np.uint8:
            raise ValueError(f"grey pixels must be uint8 (h, w), got {p.shape} {p.dtype}")
        object.__setattr__(self, "pixels", p)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class BinaryImage:
    """Two-level raster: black 0 marks the segmented rod, white 255 the rest."""

    pixels: npt.NDArray[np.uint8]

    def __post_init__(self) -> None:
        p = np.asarray(self.pixels)
        if p.ndim != 2 or p.dtype != np.uint8:
            raise ValueError(f"binary pixels must be uint8 (h, w), got {p.shape} {p.dtype}")
        levels = np.unique(p)
        if not np.all(np.isin(levels, (0, 255))):
            raise ValueError(f"binary image may only contain 0 and 255, got levels {levels}")
        object.__setattr__(self, "pixels", p)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class DistanceMap:
    """Per-pixel distance to the nearest black pixel, in pixel units."""

    values: npt.NDArray[np.double]
    metric: str = "euclidean"

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"distance values must be 2D, got ndim={v.ndim}")
        if not np.all(np.isfinite(v)) or np.any(v < 0.0):
            raise ValueError("distance values must be finite and non-negative")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def vector(self) -> npt.NDArray[np.double]:
        """Row-major flattening used as the observation vector."""
        return self.values.ravel().copy()


@dataclass(frozen=True)
class CameraConfig:
    """Orthographic camera mapping the world x-y plane onto the raster.

    ``origin`` is the world coordinate of the outer top-left corner of pixel
    (0, 0); world x runs right, world y runs up (so increasing row index
    moves down in world y). ``scale`` is pixels per world unit and
    ``stroke_radius`` is the half-width of the rendered stroke in world
    units.
    """

    width: int
    height: int
    scale: float
    origin: tuple[float, float]
    stroke_radius: float

    def __post_init__(self) -> None:
        if self.width < 4 or self.height < 4:
            raise ConfigurationError(
                f"camera needs at least 4x4 pixels, got {self.width}x{self.height}"
            )
        if not (np.isfinite(self.scale) and self.scale > 0.0):
            raise ConfigurationError(f"camera scale must be positive, got {self.scale}")
        if not (np.isfinite(self.stroke_radius) and self.stroke_radius > 0.0):
            raise ConfigurationError(
                f"stroke radius must be positive, got {self.stroke_radius}"
            )
        ox, oy = self.origin
        if not (np.isfinite(ox) and np.isfinite(oy)):
            raise ConfigurationError("camera origin must be finite")


def render(
    centerline: npt.NDArray[np.double], camera: CameraConfig
) -> RgbImage:
    """Draw a polyline as a black disc-capped stroke on a white background.

    Accepts an ``(n, 2)`` or ``(n, 3)`` array of world points (a third
    column is dropped by the orthographic projection). A pixel turns black
    when its center lies within ``stroke_radius`` of the polyline, which
    produces round caps and joins for free. A stroke that leaves the frame
    is clipped silently except for the ``clipped`` flag on the result.
    """
    pts = np.asarray(centerline, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] not in (2, 3):
        raise ValueError(f"centerline must be (n >= 2, 2 or 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("centerline contains non-finite points")
    xy = pts[:, :2]

    # World -> pixel coordinates (x right, y down, unit = one pixel).
    px = np.empty_like(xy)
    px[:, 0] = (xy[:, 0] - camera.origin[0]) * camera.scale
    px[:, 1] = (camera.origin[1] - xy[:, 1]) * camera.scale
    radius = camera.stroke_radius * camera.scale
    h, w = camera.height, camera.width

    clipped = bool(
        np.any(px[:, 0] - radius < 0.0)
        or np.any(px[:, 0] + radius > w)
        or np.any(px[:, 1] - radius < 0.0)
        or np.any(px[:, 1] + radius > h)
    )

    black = np.zeros((h, w), dtype=bool)
    r_sq = radius * radius
    for a, b in zip(px[:-1], px[1:]):
        lo_x = max(int(np.floor(min(a[0], b[0]) - radius - 1.0)), 0)
        hi_x = min(int(np.ceil(max(a[0], b[0]) + radius + 1.0)), w)
        lo_y = max(int(np.floor(min(a[1], b[1]) - radius - 1.0)), 0)
        hi_y = min(int(np.ceil(max(a[1], b[1]) + radius + 1.0)), h)
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        cx = np.arange(lo_x, hi_x, dtype=np.float64) + 0.5
        cy = np.arange(lo_y, hi_y, dtype=np.float64) + 0.5
        dx = b[0] - a[0]
        dy = b[1] - a[1]
        seg_sq = dx * dx + dy * dy
        ex = cx[None, :] - a[0]
        ey = cy[:, None] - a[1]
        if seg_sq > 0.0:
            t = np.clip((ex * dx + ey * dy) / seg_sq, 0.0, 1.0)
            qx = ex - t * dx
            qy = ey - t * dy
        else:
            qx = ex + np.zeros_like(ey)
            qy = ey + np.zeros_like(ex)
        black[lo_y:hi_y, lo_x:hi_x] |= qx * qx + qy * qy <= r_sq

    pixels = np.full((h, w, 3), 255, dtype=np.uint8)
    pixels[black] = 0
    return RgbImage(pixels=pixels, clipped=clipped)


def to_grey(image: RgbImage) -> GreyImage:
    """Luma conversion ``round(0.299 R + 0.587 G + 0.114 B)``."""
    luma = np.rint(image.pixels.astype(np.float64) @ _LUMA_WEIGHTS)
    return GreyImage(np.clip(luma, 0.0, 255.0).astype(np.uint8))


def threshold(image: GreyImage, sigma: int) -> BinaryImage:
    """Map grey values ``<= sigma`` to black (0) and the rest to white (255)."""
    if not isinstance(sigma, (int, np.integer)) or not (0 <= int(sigma) <= 255):
        raise ConfigurationError(
            f"threshold must be an integer in [0, 255], got {sigma!r}"
        )
    out = np.where(image.pixels <= np.uint8(sigma), 0, 255).astype(np.uint8)
    return BinaryImage(out)


@njit(cache=True, nogil=True)
def _envelope_1d(f, d, v, z):
    # One exact 1D squared-distance transform: d[q] = min_p (q-p)^2 + f[p].
    # v holds parabola apex indices, z the envelope breakpoints.
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -_EDT_INF
    z[1] = _EDT_INF
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = _EDT_INF
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) * (q - v[k]) + f[v[k]]


@njit(cache=True, nogil=True)
def _edt_squared(black):
    # Pass 1 along columns, pass 2 along rows; exact integer-valued output.
    h, w = black.shape
    work = np.empty((h, w), dtype=np.float64)
    for j in range(w):
        col = np.empty(h, dtype=np.float64)
        for i in range(h):
            col[i] = 0.0 if black[i, j] else _EDT_INF
        d = np.empty(h, dtype=np.float64)
        v = np.empty(h, dtype=np.int64)
        z = np.empty(h + 1, dtype=np.float64)
        _envelope_1d(col, d, v, z)
        for i in range(h):
            work[i, j] = d[i]
    out = np.empty((h, w), dtype=np.float64)
    row_d = np.empty(w, dtype=np.float64)
    row_v = np.empty(w, dtype=np.int64)
    row_z = np.empty(w + 1, dtype=np.float64)
    for i in range(h):
        _envelope_1d(work[i].copy(), row_d, row_v, row_z)
        for j in range(w):
            out[i, j] = row_d[j]
    return out


@njit(cache=True, nogil=True)
def _manhattan_sweeps(black):
    # Two raster sweeps; exact for L1 because every shortest grid path is
    # monotone and therefore seen by one of the two passes.
    h, w = black.shape
    big = np.float64(h + w + 2)
    d = np.empty((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            d[i, j] = 0.0 if black[i, j] else big
    for i in range(h):
        for j in range(w):
            if i > 0 and d[i - 1, j] + 1.0 < d[i, j]:
                d[i, j] = d[i - 1, j] + 1.0
            if j > 0 and d[i, j - 1] + 1.0 < d[i, j]:
                d[i, j] = d[i, j - 1] + 1.0
    for i in range(h - 1, -1, -1):
        for j in range(w - 1, -1, -1):
            if i < h - 1 and d[i + 1, j] + 1.0 < d[i, j]:
                d[i, j] = d[i + 1, j] + 1.0
            if j < w - 1 and d[i, j + 1] + 1.0 < d[i, j]:
                d[i, j] = d[i, j + 1] + 1.0
    return d


def distance_transform(image: BinaryImage, metric: str = "euclidean") -> DistanceMap:
    """Exact distance from every pixel to the nearest black pixel.

    ``metric`` selects ``"euclidean"`` (L2, exact via the squared-distance
    envelope transform) or ``"manhattan"`` (L1, exact via two sweeps).

    Raises
    ------
    DegenerateImageError
        If the image contains no black pixel.
    """
    if metric not in ("euclidean", "manhattan"):
        raise ConfigurationError(
            f"metric must be 'euclidean' or 'manhattan', got {metric!r}"
        )
    black = image.pixels == 0
    if not black.any():
        raise DegenerateImageError(
            "binary image has no black pixel; distances are undefined"
        )
    if metric == "euclidean":
        values = np.sqrt(_edt_squared(black))
    else:
        values = _manhattan_sweeps(black)
    return DistanceMap(values=values, metric=metric)


def segment(image: RgbImage, sigma: int, metric: str = "euclidean") -> DistanceMap:
    """Full chain from a rendered frame to its distance map."""
    return distance_transform(threshold(to_grey(image), sigma), metric)


def warmup_kernels() -> None:
    """Force JIT compilation of the distance kernels (used before timing)."""
    tiny = np.zeros((3, 3), dtype=bool)
    tiny[1, 1] = True
    _edt_squared(tiny)
    _manhattan_sweeps(tiny)


# ---------------------------------------------------------------------------
# File input/output


def read_pgm(path: str | os.PathLike) -> GreyImage:
    """Read a binary (P5) portable greymap with maxval <= 255."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise InputOutputError(f"cannot read image file {path}: {exc}") from exc

    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(raw):
            c = raw[pos : pos + 1]
            if c == b"#":
                while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"truncated PGM header in {path}")
        return raw[start:pos]

    magic = token()
    if magic != b"P5":
        raise ParseError(f"{path}: expected PGM magic 'P5', got {magic!r}")
    try:
        width = int(token())
        height = int(token())
        maxval = int(token())
    except (ValueError, ParseError) as exc:
        raise ParseError(f"{path}: malformed PGM header") from exc
    if width <= 0 or height <= 0:
        raise ParseError(f"{path}: non-positive PGM dimensions {width}x{height}")
    if not (0 < maxval <= 255):
        raise ParseError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    pos += 1  # single whitespace after the header
    body = raw[pos : pos + width * height]
    if len(body) != width * height:
        raise InputOutputError(
            f"{path}: expected {width * height} pixel bytes, found {len(body)}"
        )
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width)
    return GreyImage(pixels.copy())


def write_pgm(path: str | os.PathLike, image: GreyImage | BinaryImage) -> None:
    """Write a binary (P5) portable greymap."""
    h, w = image.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(image.pixels.tobytes())
    except OSError as exc:
        raise InputOutputError(f"cannot write {path}: {exc}") from exc


def write_ppm(path: str | os.PathLike, image: RgbImage) -> None:
    """Write a binary (P6) portable pixmap."""
    h, w = image.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(image.pixels.tobytes())
    except OSError as exc:
        raise InputOutputError(f"cannot write {path}: {exc}") from exc


def distance_to_grey(dmap: DistanceMap) -> GreyImage:
    """Scale a distance map onto 0..255 for a viewable PGM dump."""
    top = float(dmap.values.max())
    if top == 0.0:
        return GreyImage(np.zeros(dmap.shape, dtype=np.uint8))
    scaled = np.rint(dmap.values * (255.0 / top))
    return GreyImage(scaled.astype(np.uint8))


def _read_grey_any(path: str | os.PathLike) -> GreyImage:
    name = str(path).lower()
    if name.endswith(".png"):
        try:
            from PIL import Image
        except ImportError as exc:
            raise InputOutputError(
                "PNG support requires the optional Pillow dependency "
                "(install the 'png' extra)"
            ) from exc
        try:
            with Image.open(path) as img:
                grey = img.convert("L")
                return GreyImage(np.asarray(grey, dtype=np.uint8))
        except OSError as exc:
            raise InputOutputError(f"cannot read PNG {path}: {exc}") from exc
    return read_pgm(path)


def ingest(
    path: str | os.PathLike,
    sigma: int,
    metric: str = "euclidean",
    expected_shape: tuple[int, int] | None = None,
) -> DistanceMap:
    """Load an image file and run threshold + distance transform on it.

    PGM (P5) is read natively; PNG works when Pillow is installed. When
    ``expected_shape`` (height, width) is given, a size mismatch raises
    ``InputOutputError`` naming both shapes.
    """
    grey = _read_grey_any(path)
    if expected_shape is not None and grey.shape != tuple(expected_shape):
        raise InputOutputError(
            f"{path}: image is {grey.shape[1]}x{grey.shape[0]} (width x height) "
            f"but the configuration expects {expected_shape[1]}x{expected_shape[0]}"
        )
    return distance_transform(threshold(grey, sigma), metric)
