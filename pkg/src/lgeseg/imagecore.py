"""Image container, bilinear interpolation, warping and preprocessing.

Coordinates follow the pixel-node convention: pixel ``(x, y)`` is column
``x``, row ``y`` and sits at integer coordinates. Sampling outside
``[0, w-1] x [0, h-1]`` clamps to the nearest border pixel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .affinereg import AffineTransform2D
    from .ffdreg import FFDGrid


class ImageError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Image2D:
    """Scalar raster with physical pixel spacing (mm/pixel).

    ``data`` has shape ``(height, width)``; it is copied to float64 and
    made read-only on construction.
    """

    data: np.ndarray
    spacing_x: float = 1.0
    spacing_y: float = 1.0

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ImageError(f"image data must be a non-empty 2D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ImageError("image intensities must be finite")
        if not (self.spacing_x > 0 and self.spacing_y > 0):
            raise ImageError(f"pixel spacing must be positive, got ({self.spacing_x}, {self.spacing_y})")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_x", float(self.spacing_x))
        object.__setattr__(self, "spacing_y", float(self.spacing_y))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Image2D":
        return Image2D(data, self.spacing_x, self.spacing_y)

    def __eq__(self, other):
        if not isinstance(other, Image2D):
            return NotImplemented
        return (
            self.spacing_x == other.spacing_x
            and self.spacing_y == other.spacing_y
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )

    __hash__ = None


@dataclass(frozen=True)
class IntensityHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def bin_count(self) -> int:
        return len(self.counts)

    @classmethod
    def of(cls, img: Image2D, bin_count: int = 256) -> "IntensityHistogram":
        if bin_count < 2:
            raise ImageError("bin_count must be at least 2")
        lo, hi = float(img.data.min()), float(img.data.max())
        if hi <= lo:
            hi = lo + 1.0
        counts, edges = np.histogram(img.data, bins=bin_count, range=(lo, hi))
        return cls(edges, counts)

    def cdf(self) -> np.ndarray:
        """Cumulative fraction at each bin edge (length ``bin_count + 1``)."""
        c = np.concatenate([[0], np.cumsum(self.counts)]).astype(np.float64)
        return c / c[-1]


def bilinear_sample(img: Image2D, x, y):
    """Bilinearly interpolate ``img`` at ``(x, y)``.

    Accepts scalars or equally shaped arrays. Exact at integer nodes.
    """
    data = img.data
    h, w = data.shape
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, w - 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, h - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = data[y0, x0] * (1.0 - fx) + data[y0, x1] * fx
    bot = data[y1, x0] * (1.0 - fx) + data[y1, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    if out.ndim == 0:
        return float(out)
    return out


def pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Column and row coordinate arrays, each of shape ``(height, width)``."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys


def resample(img: Image2D, new_spacing_x: float, new_spacing_y: float) -> Image2D:
    """Resample to a new pixel spacing over the same physical extent."""
    if not (new_spacing_x > 0 and new_spacing_y > 0):
        raise ImageError("resample spacing must be positive")
    if new_spacing_x == img.spacing_x and new_spacing_y == img.spacing_y:
        return img
    rx = img.spacing_x / new_spacing_x
    ry = img.spacing_y / new_spacing_y
    new_w = max(1, int(np.floor(img.width * rx + 0.5)))
    new_h = max(1, int(np.floor(img.height * ry + 0.5)))
    xs, ys = pixel_grid(new_w, new_h)
    out = bilinear_sample(img, xs * (new_spacing_x / img.spacing_x), ys * (new_spacing_y / img.spacing_y))
    return Image2D(out, new_spacing_x, new_spacing_y)


def histogram_specify(source: Image2D, reference: Image2D, bin_count: int = 256) -> Image2D:
    """Map ``source`` intensities so their distribution follows ``reference``.

    Each intensity goes through the source CDF and then the inverse of the
    reference CDF. Both CDFs are piecewise linear over their bin edges, so
    the mapping is monotone and self-specification is the identity.
    """
    ref_hist = IntensityHistogram.of(reference, bin_count)
    if np.count_nonzero(ref_hist.counts) < 2:
        raise ImageError("reference image is constant; inverse CDF is undefined")
    src_hist = IntensityHistogram.of(source, bin_count)
    if np.count_nonzero(src_hist.counts) < 2:
        raise ImageError("source image is constant")

    q = np.interp(source.data, src_hist.bin_edges, src_hist.cdf())
    out = _inverse_cdf(q, ref_hist.bin_edges, ref_hist.cdf())
    return source.with_data(out)


def _inverse_cdf(q: np.ndarray, edges: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    # segment k spans edges[k]..edges[k+1]; take the first one whose upper cdf reaches q
    k = np.searchsorted(cdf[1:], q, side="left")
    k = np.clip(k, 0, len(edges) - 2)
    lo, hi = cdf[k], cdf[k + 1]
    rise = hi - lo
    frac = np.where(rise > 0, (q - lo) / np.where(rise > 0, rise, 1.0), 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    return edges[k] + frac * (edges[k + 1] - edges[k])


def center_fit(img: Image2D, width: int, height: int) -> tuple[Image2D, tuple[int, int]]:
    """Center-crop or center-pad (edge replication) to ``width`` x ``height``.

    Returns the new image and the ``(dx, dy)`` offset to add to input pixel
    coordinates to obtain output coordinates.
    """
    if width < 1 or height < 1:
        raise ImageError("target size must be positive")
    dx = (width - img.width) // 2
    dy = (height - img.height) // 2
    xs = np.clip(np.arange(width) - dx, 0, img.width - 1)
    ys = np.clip(np.arange(height) - dy, 0, img.height - 1)
    return img.with_data(img.data[np.ix_(ys, xs)]), (dx, dy)


def warp_affine(img: Image2D, A: "AffineTransform2D") -> Image2D:
    """Backward warp: output pixel ``p`` takes ``img`` at ``A^-1 p``."""
    inv = A.inverse_matrix()
    if A.is_identity():
        return img
    xs, ys = pixel_grid(img.width, img.height)
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    return img.with_data(bilinear_sample(img, sx, sy))


def warp_ffd(img: Image2D, grid: "FFDGrid") -> Image2D:
    """Backward warp through the FFD: output ``p`` takes ``img`` at ``T(p)``."""
    grid.check_covers(img.width, img.height)
    if not np.any(grid.displacements):
        return img
    dx, dy = grid.displacement_field(img.width, img.height)
    xs, ys = pixel_grid(img.width, img.height)
    return img.with_data(bilinear_sample(img, xs + dx, ys + dy))
