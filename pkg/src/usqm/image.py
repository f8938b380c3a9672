"""Grayscale image container, tiling, resampling, and pixel-fidelity measures.

Intensities live in [0, 1] as float64; 8-bit files are divided by 255 on
load so peak signal level is always 1.0. Images are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

from .errors import ParameterError, ShapeError, UsqmError

MIN_TILE_SIDE = 224
DEFAULT_TILE = 224
DEFAULT_STRIDE = 112


class GrayImage:
    """A single-channel image with values clamped to [0, 1]."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"expected a 2-D array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"image must be at least 1x1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ParameterError("image intensities must be finite")
        arr = np.clip(arr, 0.0, 1.0)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):  # immutable container
        raise AttributeError("GrayImage is immutable")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def crop(self, row: int, col: int, h: int, w: int) -> "GrayImage":
        if row < 0 or col < 0 or row + h > self.height or col + w > self.width:
            raise ShapeError(
                f"crop ({row},{col})+{h}x{w} exceeds image {self.shape}"
            )
        return GrayImage(self.data[row : row + h, col : col + w])

    def __eq__(self, other) -> bool:
        return isinstance(other, GrayImage) and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))


@dataclass(frozen=True)
class TileGrid:
    """Sliding-window tiling of an image: square tiles at a fixed stride.

    Origins follow the grid {0, stride, 2*stride, ...} per axis with the
    final origin clamped to (extent - tile_size) so the image edge is
    covered exactly once. Origins are unique and sorted row-major.
    """

    tile_size: int
    stride: int
    image_shape: tuple[int, int]
    origins: tuple[tuple[int, int], ...] = field(default=())

    @property
    def num_tiles(self) -> int:
        return len(self.origins)


def _axis_origins(extent: int, tile_size: int, stride: int) -> list[int]:
    last = extent - tile_size
    origins = []
    pos = 0
    while pos < last:
        origins.append(pos)
        pos += stride
    origins.append(last)
    return origins


def tile(img: GrayImage, tile_size: int = DEFAULT_TILE, stride: int = DEFAULT_STRIDE) -> TileGrid:
    """Enumerate tile origins covering the whole image.

    Requires tile_size <= both image sides; callers that may see smaller
    images should go through ensure_min_side first.
    """
    if tile_size < 1 or stride < 1:
        raise ParameterError(f"tile_size and stride must be >= 1, got {tile_size}/{stride}")
    if stride > tile_size:
        raise ParameterError(
            f"stride {stride} exceeds tile size {tile_size}; tiles would leave gaps"
        )
    if tile_size > img.height or tile_size > img.width:
        raise ShapeError(
            f"tile size {tile_size} exceeds image {img.shape}; upscale first"
        )
    rows = _axis_origins(img.height, tile_size, stride)
    cols = _axis_origins(img.width, tile_size, stride)
    origins = tuple((r, c) for r in rows for c in cols)
    return TileGrid(tile_size=tile_size, stride=stride, image_shape=img.shape, origins=origins)


def extract_tile(img: GrayImage, origin: tuple[int, int], tile_size: int) -> GrayImage:
    return img.crop(origin[0], origin[1], tile_size, tile_size)


def psnr(a: GrayImage, b: GrayImage) -> float:
    """Peak signal-to-noise ratio in dB with peak level 1.0.

    Returns +inf for identical images (the sentinel for zero MSE).
    """
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _sample_positions(n_in: int, n_out: int) -> np.ndarray:
    # endpoint-aligned mapping: first/last output samples hit first/last
    # input samples, so same-size resizing is the exact identity
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)


def _resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = arr.shape
    ys = _sample_positions(in_h, out_h)
    xs = _sample_positions(in_w, out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = arr[np.ix_(y0, x0)] * (1 - wx) + arr[np.ix_(y0, x1)] * wx
    bot = arr[np.ix_(y1, x0)] * (1 - wx) + arr[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def resize_bilinear(img: GrayImage, out_h: int, out_w: int) -> GrayImage:
    """Bilinear resampling to an arbitrary size; same-size is the identity."""
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"output size must be >= 1x1, got {out_h}x{out_w}")
    if (out_h, out_w) == img.shape:
        return img
    return GrayImage(_resize_array(img.data, out_h, out_w))


def ensure_min_side(img: GrayImage, min_side: int = MIN_TILE_SIDE) -> tuple[GrayImage, bool]:
    """Upscale so the short side reaches min_side; returns (image, was_resized).

    Aspect ratio is preserved (sides rounded, floored at min_side).
    """
    short = min(img.height, img.width)
    if short >= min_side:
        return img, False
    scale = min_side / short
    out_h = max(min_side, int(round(img.height * scale)))
    out_w = max(min_side, int(round(img.width * scale)))
    return resize_bilinear(img, out_h, out_w), True


def load_image(path: str) -> GrayImage:
    """Read an 8-bit grayscale PNG or PGM. Color inputs are rejected."""
    try:
        with PILImage.open(path) as im:
            if im.format not in ("PNG", "PPM"):  # Pillow reports PGM as PPM family
                raise UsqmError(f"{path}: unsupported format {im.format}; need PNG or PGM")
            if im.mode != "L":
                raise UsqmError(
                    f"{path}: mode {im.mode} is not 8-bit grayscale; refusing to convert"
                )
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise UsqmError(f"{path}: cannot read image ({exc})") from exc
    return GrayImage(arr)


def save_png(img: GrayImage, path: str) -> None:
    """Write as 8-bit grayscale PNG (values scaled by 255 and rounded)."""
    arr = np.clip(np.round(img.data * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path, format="PNG")
