"""Local deformation of endo-/epicardial contours on the LGE image.

Each vertex moves under a damped update driven by three forces: a
smoothness force from its two neighbours, an edge-attraction force toward
the strongest intensity change found along the radial ray through the
vertex, and a thickness force keeping each endocardial vertex at its
initial offset from its paired epicardial vertex.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from skimage.filters import threshold_otsu

from .imagecore import Image2D, bilinear_sample

log = logging.getLogger(__name__)

Kind = Literal["endo", "epi"]


class ContourError(ValueError):
    pass


def signed_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_intersect(p1, p2, q1, q2) -> np.ndarray:
    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return (d1 * d2 < 0) & (d3 * d4 < 0)


def is_simple(verts) -> bool:
    """True when no two non-adjacent edges of the closed polygon cross."""
    v = np.asarray(verts, dtype=np.float64)
    n = len(v)
    if n < 3:
        return False
    a, b = v, np.roll(v, -1, axis=0)
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    return not bool(np.any(_segments_intersect(a[i], b[i], a[j], b[j])))


@dataclass(frozen=True, eq=False)
class Contour:
    """Closed polygon of mesh vertices, stored counterclockwise.

    Clockwise input is reversed on construction.
    """

    vertices: np.ndarray
    kind: Kind = "endo"

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ContourError(f"vertices must have shape (n, 2), got {v.shape}")
        if len(v) < 8:
            raise ContourError(f"a contour needs at least 8 vertices, got {len(v)}")
        if not np.all(np.isfinite(v)):
            raise ContourError("contour vertices must be finite")
        if self.kind not in ("endo", "epi"):
            raise ContourError(f"contour kind must be 'endo' or 'epi', got {self.kind!r}")
        if not is_simple(v):
            raise ContourError(f"{self.kind} contour is self-intersecting")
        if signed_area(v) < 0:
            v = v[::-1].copy()
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    def __len__(self):
        return len(self.vertices)

    def __eq__(self, other):
        if not isinstance(other, Contour):
            return NotImplemented
        return self.kind == other.kind and bool(np.array_equal(self.vertices, other.vertices))

    __hash__ = None

    def moved(self, vertices: np.ndarray) -> "Contour":
        return Contour(vertices, self.kind)

    def to_text(self) -> str:
        lines = [f"kind={self.kind} n={len(self.vertices)}"]
        lines += [f"{float(x)!r} {float(y)!r}" for x, y in self.vertices]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Contour":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ContourError("empty contour file")
        head = dict(tok.split("=", 1) for tok in lines[0].split() if "=" in tok)
        if "kind" not in head or "n" not in head:
            raise ContourError(f"contour header must be 'kind=<endo|epi> n=<count>', got {lines[0]!r}")
        try:
            n = int(head["n"])
        except ValueError as exc:
            raise ContourError(f"bad vertex count {head['n']!r}") from exc
        if len(lines) - 1 != n:
            raise ContourError(f"contour header declares {n} vertices but file has {len(lines) - 1}")
        try:
            pts = np.array([[float(t) for t in ln.split()] for ln in lines[1:]])
        except ValueError as exc:
            raise ContourError("contour vertex lines must hold two numbers") from exc
        if pts.shape != (n, 2):
            raise ContourError("each contour vertex line must hold exactly 'x y'")
        return cls(pts, head["kind"])


def circle_contour(center, radius: float, n: int = 80, kind: Kind = "endo", phase: float = 0.0) -> Contour:
    ang = phase + 2 * np.pi * np.arange(n) / n
    c = np.asarray(center, dtype=np.float64)
    return Contour(np.stack([c[0] + radius * np.cos(ang), c[1] + radius * np.sin(ang)], axis=1), kind)


def resample_closed(verts, n: int) -> np.ndarray:
    """``n`` points equally spaced by arc length along a closed polyline."""
    v = np.asarray(verts, dtype=np.float64)
    closed = np.vstack([v, v[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.arange(n) * s[-1] / n
    return np.stack([np.interp(target, s, closed[:, 0]), np.interp(target, s, closed[:, 1])], axis=1)


def polygon_inside(inner, outer, strict: bool = True) -> bool:
    """Whether every vertex of ``inner`` lies inside ``outer``.

    With ``strict`` the two outlines must not touch or cross; otherwise
    vertices lying on the outer outline count as inside.
    """
    from .metrics import point_to_polyline, points_in_polygon

    inner = np.asarray(inner, dtype=np.float64)
    outer = np.asarray(outer, dtype=np.float64)
    inside = points_in_polygon(outer, inner[:, 0], inner[:, 1])
    if strict:
        if not np.all(inside):
            return False
        a, b = inner, np.roll(inner, -1, axis=0)
        c, d = outer, np.roll(outer, -1, axis=0)
        return not bool(np.any(_segments_intersect(a[:, None], b[:, None], c[None], d[None])))
    on_edge = point_to_polyline(inner, outer) < 1e-9
    return bool(np.all(inside | on_edge))


def lv_center(endo: Contour) -> np.ndarray:
    """Area centroid of the endocardial polygon."""
    v = endo.vertices if isinstance(endo, Contour) else np.asarray(endo, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * np.sum(cross)
    if abs(area) < 1e-12:
        raise ContourError("cannot take the centroid of a zero-area polygon")
    cx = np.sum((x + xn) * cross) / (6 * area)
    cy = np.sum((y + yn) * cross) / (6 * area)
    return np.array([cx, cy])


def _radial_dirs(verts: np.ndarray, center) -> np.ndarray:
    r = verts - np.asarray(center, dtype=np.float64)
    norm = np.linalg.norm(r, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ContourError("vertex coincides with the LV center; radial direction undefined")
    return r / norm


def radial_profile(img: Image2D, vertex, center, band: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Samples at unit steps ``-band..band`` along the outward ray through ``vertex``.

    Returns ``(offsets, intensities)``.
    """
    v = np.asarray(vertex, dtype=np.float64)
    d = _radial_dirs(v[None], center)[0]
    offsets = np.arange(-band, band + 1, dtype=np.float64)
    pts = v[None] + offsets[:, None] * d[None]
    return offsets, bilinear_sample(img, pts[:, 0], pts[:, 1])


@dataclass(frozen=True)
class EdgePriors:
    """Thresholds for edge detection.

    ``bright_threshold`` separates bright plateaus (blood pool, enhanced
    scar) from healthy myocardium; ``None`` disables the scar case.
    """

    bright_threshold: float | None = None
    noise_floor: float = 5.0
    scar_step_min: float = 15.0


@dataclass(frozen=True)
class EdgeHit:
    position: float
    magnitude: float
    scar_case: bool = False


def _refine(mag: np.ndarray, j: int) -> float:
    if 0 < j < len(mag) - 1 and mag[j] >= mag[j - 1] and mag[j] >= mag[j + 1]:
        den = mag[j - 1] - 2 * mag[j] + mag[j + 1]
        if den < 0:
            return float(np.clip(0.5 * (mag[j - 1] - mag[j + 1]) / den, -0.5, 0.5))
    return 0.0


def detect_edge_point(profile, kind: Kind, priors: EdgePriors | None = None) -> EdgeHit | None:
    """Strongest step along a radial profile, or ``None`` below the noise floor.

    ``profile`` is the ``(offsets, intensities)`` pair from
    :func:`radial_profile`. Adjacent-sample differences are located midway
    between their samples and refined by a parabola through the three
    magnitudes around the maximum.

    For endocardial profiles a bright-to-bright drop (blood pool into an
    enhanced sub-endocardial layer) takes priority over the globally
    strongest step: the drop must be negative going outward, both two-sample
    plateaus around it must exceed ``priors.bright_threshold``, and the drop
    itself must be at least ``priors.scar_step_min``.
    """
    priors = priors or EdgePriors()
    offsets, vals = (np.asarray(a, dtype=np.float64) for a in profile)
    if len(vals) < 2:
        return None
    d = np.diff(vals)
    mag = np.abs(d)
    mid = offsets[:-1] + 0.5 * np.diff(offsets)

    if kind == "endo" and priors.bright_threshold is not None:
        thr = priors.bright_threshold
        best = None
        for j in range(1, len(d) - 1):
            if d[j] >= 0:
                continue
            inner = 0.5 * (vals[j - 1] + vals[j])
            outer = 0.5 * (vals[j + 1] + vals[j + 2])
            if inner >= thr and outer >= thr and mag[j] >= priors.scar_step_min:
                if best is None or mag[j] > mag[best]:
                    best = j
        if best is not None and mag[best] >= priors.noise_floor:
            return EdgeHit(float(mid[best] + _refine(mag, best)), float(mag[best]), True)

    j = int(np.argmax(mag))
    if mag[j] < priors.noise_floor:
        return None
    return EdgeHit(float(mid[j] + _refine(mag, j)), float(mag[j]), False)


def normalize_weights(hits: list[EdgeHit | None]) -> np.ndarray:
    """Edge weights proportional to step magnitude, scaled so the largest is 1."""
    mags = np.array([h.magnitude if h is not None else 0.0 for h in hits])
    top = mags.max() if len(mags) else 0.0
    return mags / top if top > 0 else mags


def smoothness_forces(verts: np.ndarray, tangent_weight: float = 1.0, normal_weight: float = 0.5) -> np.ndarray:
    """Neighbour-midpoint pull split into tangential and normal parts, for every vertex."""
    prev, nxt = np.roll(verts, 1, axis=0), np.roll(verts, -1, axis=0)
    m = 0.5 * (prev + nxt) - verts
    t = nxt - prev
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    t = np.divide(t, tn, out=np.zeros_like(t), where=tn > 0)
    n = np.stack([-t[:, 1], t[:, 0]], axis=1)
    mt = np.sum(m * t, axis=1, keepdims=True)
    mn = np.sum(m * n, axis=1, keepdims=True)
    return tangent_weight * mt * t + normal_weight * mn * n


def smoothness_force(contour: Contour, i: int) -> np.ndarray:
    return smoothness_forces(contour.vertices)[i]


def edge_force(vertex, edge_point, omega: float) -> np.ndarray:
    """``omega * (edge_point - vertex)``; zero when no edge was found."""
    if edge_point is None:
        return np.zeros(2)
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"edge weight must lie in [0, 1], got {omega}")
    return omega * (np.asarray(edge_point, dtype=np.float64) - np.asarray(vertex, dtype=np.float64))


def pair_radially(endo: np.ndarray, epi: np.ndarray, center) -> np.ndarray:
    """For each endo vertex, the epi vertex closest to its outward radial ray."""
    dirs = _radial_dirs(endo, center)
    rel = epi[None, :, :] - endo[:, None, :]
    along = np.sum(rel * dirs[:, None, :], axis=-1)
    perp = np.abs(rel[..., 0] * dirs[:, None, 1] - rel[..., 1] * dirs[:, None, 0])
    perp = np.where(along > 0, perp, np.inf)
    partner = np.argmin(perp, axis=1)
    # an epi outline wholly behind the vertex falls back to the nearest vertex
    fallback = ~np.isfinite(perp[np.arange(len(endo)), partner])
    if np.any(fallback):
        dist = np.linalg.norm(rel, axis=-1)
        partner[fallback] = np.argmin(dist[fallback], axis=1)
    return partner


@dataclass(frozen=True, eq=False)
class ContourPair:
    """Endo and epi contours plus the immutable initial thickness offsets.

    ``partner[i]`` is the epi vertex paired with endo vertex ``i`` and
    ``thickness_ref[i] = epi0[partner[i]] - endo0[i]``.
    """

    endo: Contour
    epi: Contour
    thickness_ref: np.ndarray
    partner: np.ndarray

    @classmethod
    def from_contours(cls, endo: Contour, epi: Contour) -> "ContourPair":
        if endo.kind != "endo" or epi.kind != "epi":
            raise ContourError("pair requires an 'endo' and an 'epi' contour")
        if not polygon_inside(endo.vertices, epi.vertices):
            raise ContourError("endocardial contour must lie strictly inside the epicardial contour")
        center = lv_center(endo)
        partner = pair_radially(endo.vertices, epi.vertices, center)
        ref = epi.vertices[partner] - endo.vertices
        ref.setflags(write=False)
        partner.setflags(write=False)
        return cls(endo, epi, ref, partner)

    def moved(self, endo: np.ndarray, epi: np.ndarray) -> "ContourPair":
        return ContourPair(self.endo.moved(endo), self.epi.moved(epi), self.thickness_ref, self.partner)

    def endo_inside_epi(self) -> bool:
        return polygon_inside(self.endo.vertices, self.epi.vertices)


def thickness_force(pair: ContourPair, i: int) -> tuple[np.ndarray, np.ndarray]:
    """``(F_endo, F_epi)`` for endo vertex ``i`` and its paired epi vertex."""
    p_endo = pair.endo.vertices[i]
    p_epi = pair.epi.vertices[pair.partner[i]]
    ref = pair.thickness_ref[i]
    return p_epi - ref - p_endo, p_endo + ref - p_epi


def _epi_thickness_forces(endo: np.ndarray, epi: np.ndarray, pair: ContourPair) -> np.ndarray:
    # epi vertices paired with several endo vertices take the mean force
    per = endo + pair.thickness_ref - epi[pair.partner]
    acc = np.zeros_like(epi)
    cnt = np.zeros(len(epi))
    np.add.at(acc, pair.partner, per)
    np.add.at(cnt, pair.partner, 1.0)
    return np.divide(acc, cnt[:, None], out=np.zeros_like(acc), where=cnt[:, None] > 0)


@dataclass(frozen=True)
class ForceConfig:
    gamma: float = 0.7
    alpha: float = 0.35
    beta: float = 0.15
    theta: float = 0.1
    band: int = 4
    iters: int = 50
    stop_move: float = 0.05
    noise_floor: float = 5.0
    scar_step_min: float = 15.0
    tangent_weight: float = 1.0
    normal_weight: float = 0.5

    def __post_init__(self):
        if min(self.alpha, self.beta, self.theta) < 0:
            raise ValueError("force weights must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("damping gamma must lie in [0, 1]")
        if self.band < 1 or self.iters < 0:
            raise ValueError("band >= 1 and iters >= 0 required")


def bright_threshold(img: Image2D, region: Contour) -> float | None:
    """Otsu threshold of the image samples inside ``region``."""
    from .metrics import points_in_polygon

    v = region.vertices
    x0, y0 = np.floor(v.min(axis=0)).astype(int)
    x1, y1 = np.ceil(v.max(axis=0)).astype(int)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, img.width - 1), min(y1, img.height - 1)
    if x1 < x0 or y1 < y0:
        return None
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1].astype(np.float64)
    inside = points_in_polygon(v, xs, ys)
    samples = img.data[y0 : y1 + 1, x0 : x1 + 1][inside]
    if samples.size < 2 or np.ptp(samples) == 0:
        return None
    return float(threshold_otsu(samples))


def _edge_forces(img: Image2D, verts: np.ndarray, center, kind: Kind, priors: EdgePriors, band: int):
    dirs = _radial_dirs(verts, center)
    offsets = np.arange(-band, band + 1, dtype=np.float64)
    pts = verts[:, None, :] + offsets[None, :, None] * dirs[:, None, :]
    profiles = bilinear_sample(img, pts[..., 0], pts[..., 1])
    hits = [detect_edge_point((offsets, prof), kind, priors) for prof in profiles]
    omega = normalize_weights(hits)
    pos = np.array([h.position if h is not None else 0.0 for h in hits])
    return (omega * pos)[:, None] * dirs, hits


@dataclass
class DeformTrace:
    """Per-iteration snapshots ``(endo, epi)`` including the initial state."""

    states: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    scar_hits: int = 0


def deform(pair: ContourPair, img: Image2D, cfg: ForceConfig | None = None, trace: DeformTrace | None = None) -> ContourPair:
    """Run the damped force iteration, alternating epi then endo updates.

    Each half-step moves one contour while the other is frozen:
    ``p <- p + (1 - gamma)(p - p_prev) + alpha F_smooth + beta F_edge + theta F_thick``.
    The LV center and the brightness threshold for the scar case are taken
    from the initial contours.
    """
    cfg = cfg or ForceConfig()
    center = lv_center(pair.endo)
    priors = EdgePriors(bright_threshold(img, pair.epi), cfg.noise_floor, cfg.scar_step_min)
    endo = np.array(pair.endo.vertices)
    epi = np.array(pair.epi.vertices)
    endo_prev, epi_prev = endo.copy(), epi.copy()
    momentum = 1.0 - cfg.gamma
    if trace is not None:
        trace.states.append((endo.copy(), epi.copy()))

    for it in range(cfg.iters):
        f_smooth = smoothness_forces(epi, cfg.tangent_weight, cfg.normal_weight)
        f_edge, _ = _edge_forces(img, epi, center, "epi", priors, cfg.band) if cfg.beta else (0.0, None)
        f_thick = _epi_thickness_forces(endo, epi, pair) if cfg.theta else 0.0
        epi_new = epi + momentum * (epi - epi_prev) + cfg.alpha * f_smooth + cfg.beta * f_edge + cfg.theta * f_thick
        if not is_simple(epi_new):
            raise ContourError(f"epicardial contour self-intersects at iteration {it + 1}; check force weights")

        f_smooth = smoothness_forces(endo, cfg.tangent_weight, cfg.normal_weight)
        if cfg.beta:
            f_edge, hits = _edge_forces(img, endo, center, "endo", priors, cfg.band)
            if trace is not None:
                trace.scar_hits += sum(1 for h in hits if h is not None and h.scar_case)
        else:
            f_edge = 0.0
        f_thick = (epi_new[pair.partner] - pair.thickness_ref - endo) if cfg.theta else 0.0
        endo_new = endo + momentum * (endo - endo_prev) + cfg.alpha * f_smooth + cfg.beta * f_edge + cfg.theta * f_thick
        if not is_simple(endo_new):
            raise ContourError(f"endocardial contour self-intersects at iteration {it + 1}; check force weights")

        move = max(np.max(np.linalg.norm(epi_new - epi, axis=1)), np.max(np.linalg.norm(endo_new - endo, axis=1)))
        epi_prev, epi = epi, epi_new
        endo_prev, endo = endo, endo_new
        if trace is not None:
            trace.states.append((endo.copy(), epi.copy()))
        if move < cfg.stop_move:
            log.debug("contour deformation settled after %d iterations", it + 1)
            break
    return pair.moved(endo, epi)
