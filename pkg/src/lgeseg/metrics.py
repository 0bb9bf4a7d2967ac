"""Segmentation evaluation metrics and baseline image similarity measures."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .imagecore import Image2D


class MetricError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        b = np.array(self.bits, dtype=bool)
        if b.ndim != 2:
            raise MetricError("mask must be 2D")
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    __hash__ = None


def points_in_polygon(poly: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Even-odd crossing test of points ``(px, py)`` against a closed polygon."""
    poly = np.asarray(poly, dtype=np.float64)
    inside = np.zeros(np.broadcast(px, py).shape, dtype=bool)
    x1, y1 = poly[:, 0], poly[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    for ax, ay, bx, by in zip(x1, y1, x2, y2):
        if ay == by:
            continue
        crosses = (ay > py) != (by > py)
        xint = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (px < xint)
    return inside


def rasterize(contour, width: int, height: int) -> BinaryMask:
    """Mask of pixel centers inside the contour polygon (even-odd rule)."""
    from .contour import Contour, is_simple

    verts = contour.vertices if isinstance(contour, Contour) else np.asarray(contour, dtype=np.float64)
    if not is_simple(verts):
        raise MetricError("cannot rasterize a self-intersecting polygon")
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return BinaryMask(points_in_polygon(verts, xs, ys))


def dice(a: BinaryMask, b: BinaryMask) -> float:
    if a.bits.shape != b.bits.shape:
        raise MetricError(f"mask dimension mismatch {a.bits.shape} vs {b.bits.shape}")
    total = a.area + b.area
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a.bits & b.bits) / total


def myocardium_mask(pair, width: int, height: int) -> BinaryMask:
    """Epicardial region minus endocardial region."""
    from .contour import polygon_inside

    if not polygon_inside(pair.endo.vertices, pair.epi.vertices, strict=False):
        raise MetricError("endocardial contour is not contained in the epicardial contour")
    epi = rasterize(pair.epi, width, height)
    endo = rasterize(pair.endo, width, height)
    return BinaryMask(epi.bits & ~endo.bits)


def point_to_polyline(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Distance from each point to the closest point on a closed polyline."""
    p = np.asarray(points, dtype=np.float64)[:, None, :]
    a = np.asarray(poly, dtype=np.float64)
    b = np.roll(a, -1, axis=0)
    ab = (b - a)[None]
    ap = p - a[None]
    denom = np.sum(ab * ab, axis=-1)
    t = np.where(denom > 0, np.sum(ap * ab, axis=-1) / np.where(denom > 0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab
    return np.min(np.linalg.norm(p - closest, axis=-1), axis=1)


def contour_distance(auto, manual) -> tuple[float, float]:
    """Symmetric mean and max vertex-to-polyline distance between two contours."""
    a = getattr(auto, "vertices", auto)
    m = getattr(manual, "vertices", manual)
    d = np.concatenate([point_to_polyline(a, m), point_to_polyline(m, a)])
    return float(np.mean(d)), float(np.max(d))


def ssd(a: Image2D, b: Image2D) -> float:
    """Mean squared intensity difference."""
    if a.shape != b.shape:
        raise MetricError(f"dimension mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    return float(np.mean(d * d))


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


def nmi_arrays(a: np.ndarray, b: np.ndarray, bins: int = 32) -> float:
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise MetricError("NMI undefined for a constant image")
    joint, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=bins, range=[[a.min(), a.max()], [b.min(), b.max()]])
    joint /= joint.sum()
    h_joint = _entropy(joint)
    return (_entropy(joint.sum(axis=1)) + _entropy(joint.sum(axis=0))) / h_joint


def nmi(a: Image2D, b: Image2D, bins: int = 32) -> float:
    """Normalized mutual information ``(H(A) + H(B)) / H(A, B)``, base-2 entropies.

    Each image is binned into ``bins`` equal-width bins over its own range.
    """
    if a.shape != b.shape:
        raise MetricError(f"dimension mismatch {a.shape} vs {b.shape}")
    return nmi_arrays(a.data, b.data, bins)


@dataclass(frozen=True)
class EvalReport:
    dice_endo: float
    dice_epi: float
    dice_myo: float
    avg_dist_endo: float
    max_dist_endo: float
    avg_dist_epi: float
    max_dist_epi: float

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in fields(self))

    def to_record(self, **extra) -> str:
        """Single-line JSON record, suitable for appending to a log."""
        return json.dumps({**extra, **asdict(self)}, sort_keys=False)

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        vals = {}
        for ln in text.splitlines():
            if not ln.strip():
                continue
            key, _, value = ln.partition("=")
            vals[key.strip()] = float(value)
        return cls(**vals)


def evaluate_pair(auto, manual) -> EvalReport:
    """Dice (endo region, epi region, myocardium) and contour distances."""
    allv = np.concatenate([auto.endo.vertices, auto.epi.vertices, manual.endo.vertices, manual.epi.vertices])
    if np.min(allv) < 0:
        raise MetricError("contour coordinates must be non-negative pixel positions")
    w = int(np.ceil(allv[:, 0].max())) + 2
    h = int(np.ceil(allv[:, 1].max())) + 2
    d_endo = dice(rasterize(auto.endo, w, h), rasterize(manual.endo, w, h))
    d_epi = dice(rasterize(auto.epi, w, h), rasterize(manual.epi, w, h))
    d_myo = dice(myocardium_mask(auto, w, h), myocardium_mask(manual, w, h))
    ae, me = contour_distance(auto.endo, manual.endo)
    ap, mp = contour_distance(auto.epi, manual.epi)
    return EvalReport(d_endo, d_epi, d_myo, ae, me, ap, mp)
