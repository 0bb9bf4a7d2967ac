"""B-spline free-form deformation registration with a pattern-intensity cost.

The control lattice stores displacements of the backward (fixed -> moving)
resampling map: ``warp_ffd(moving, grid)(p) = moving(p + D(p))``.
Control point ``(a, b)`` of the displacement array sits at pixel position
``origin + (a * spacing_x, b * spacing_y)``; the default origin of
``(-spacing_x, -spacing_y)`` gives the one-cell margin that keeps the 4x4
support window inside the lattice for every image pixel.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .affinereg import _ncc_arrays
from .imagecore import Image2D, bilinear_sample, pixel_grid, warp_ffd

log = logging.getLogger(__name__)


class GridError(ValueError):
    pass


def bspline_basis(l: int, u: float) -> float:
    """Uniform cubic B-spline basis ``B_l(u)`` for ``l`` in 0..3 and ``0 <= u < 1``."""
    if not 0.0 <= u < 1.0:
        raise ValueError(f"basis parameter must lie in [0, 1), got {u}")
    if l == 0:
        return (1 - u) ** 3 / 6.0
    if l == 1:
        return (3 * u**3 - 6 * u**2 + 4) / 6.0
    if l == 2:
        return (-3 * u**3 + 3 * u**2 + 3 * u + 1) / 6.0
    if l == 3:
        return u**3 / 6.0
    raise ValueError(f"B-spline basis index must be 0..3, got {l}")


def _basis_all(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return np.stack([(1 - u) ** 3 / 6, (3 * u**3 - 6 * u**2 + 4) / 6, (-3 * u**3 + 3 * u**2 + 3 * u + 1) / 6, u**3 / 6])


def _basis_d1(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return np.stack([-((1 - u) ** 2) / 2, (3 * u**2 - 4 * u) / 2, (-3 * u**2 + 2 * u + 1) / 2, u**2 / 2])


def _basis_d2(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return np.stack([1 - u, 3 * u - 2, -3 * u + 1, u])


@dataclass(frozen=True, eq=False)
class FFDGrid:
    """Control-point lattice; ``displacements`` has shape ``(ny, nx, 2)``."""

    displacements: np.ndarray
    spacing_x: float = 8.0
    spacing_y: float = 8.0
    origin_x: float = -8.0
    origin_y: float = -8.0

    def __post_init__(self):
        d = np.array(self.displacements, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 2:
            raise GridError(f"displacements must have shape (ny, nx, 2), got {d.shape}")
        if d.shape[0] < 4 or d.shape[1] < 4:
            raise GridError("a cubic B-spline lattice needs at least 4x4 control points")
        if not np.all(np.isfinite(d)):
            raise GridError("control displacements must be finite")
        if not (self.spacing_x > 0 and self.spacing_y > 0):
            raise GridError("grid spacing must be positive")
        d.setflags(write=False)
        object.__setattr__(self, "displacements", d)

    @property
    def nx(self) -> int:
        return self.displacements.shape[1]

    @property
    def ny(self) -> int:
        return self.displacements.shape[0]

    @classmethod
    def for_image(cls, width: int, height: int, spacing_x: float = 8.0, spacing_y: float = 8.0) -> "FFDGrid":
        """Zero lattice covering a ``width`` x ``height`` image."""
        nx = int(math.floor((width - 1) / spacing_x)) + 4
        ny = int(math.floor((height - 1) / spacing_y)) + 4
        return cls(np.zeros((ny, nx, 2)), spacing_x, spacing_y, -spacing_x, -spacing_y)

    def with_displacements(self, d: np.ndarray) -> "FFDGrid":
        return FFDGrid(d, self.spacing_x, self.spacing_y, self.origin_x, self.origin_y)

    def control_positions(self) -> np.ndarray:
        """Pixel positions of all control points, shape ``(ny, nx, 2)``."""
        xs = self.origin_x + self.spacing_x * np.arange(self.nx)
        ys = self.origin_y + self.spacing_y * np.arange(self.ny)
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def _index(self, x, y):
        tx = (np.asarray(x, dtype=np.float64) - self.origin_x) / self.spacing_x
        ty = (np.asarray(y, dtype=np.float64) - self.origin_y) / self.spacing_y
        fx, fy = np.floor(tx), np.floor(ty)
        return fx.astype(np.intp) - 1, fy.astype(np.intp) - 1, tx - fx, ty - fy

    def covers(self, x, y) -> np.ndarray:
        i, j, _, _ = self._index(x, y)
        return (i >= 0) & (j >= 0) & (i + 3 <= self.nx - 1) & (j + 3 <= self.ny - 1)

    def check_covers(self, width: int, height: int) -> None:
        corners_x = np.array([0.0, width - 1.0])
        corners_y = np.array([0.0, height - 1.0])
        if not np.all(self.covers(corners_x[:, None], corners_y[None, :])):
            raise GridError(
                f"{self.nx}x{self.ny} lattice (spacing {self.spacing_x}, {self.spacing_y}, "
                f"origin {self.origin_x}, {self.origin_y}) does not cover a {width}x{height} image"
            )

    def axis_weights(self, n: int, axis: str, order: int = 0) -> np.ndarray:
        """Matrix ``W`` (n x n_ctrl) with ``W[p, a]`` the weight of control ``a`` at pixel ``p``.

        ``order`` selects the basis derivative, scaled to per-pixel units.
        """
        if axis == "x":
            origin, s, nc = self.origin_x, self.spacing_x, self.nx
        else:
            origin, s, nc = self.origin_y, self.spacing_y, self.ny
        t = (np.arange(n, dtype=np.float64) - origin) / s
        f = np.floor(t)
        a0 = f.astype(np.intp) - 1
        u = t - f
        basis = (_basis_all, _basis_d1, _basis_d2)[order](u) / s**order
        W = np.zeros((n, nc))
        rows = np.arange(n)
        for l in range(4):
            W[rows, a0 + l] = basis[l]
        return W

    def displacement_field(self, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``(dx, dy)`` displacement at every pixel, each ``(height, width)``."""
        self.check_covers(width, height)
        Wx = self.axis_weights(width, "x")
        Wy = self.axis_weights(height, "y")
        d = self.displacements
        return Wy @ d[:, :, 0] @ Wx.T, Wy @ d[:, :, 1] @ Wx.T

    def to_text(self) -> str:
        lines = [f"{self.nx} {self.ny} {self.spacing_x!r} {self.spacing_y!r} {self.origin_x!r} {self.origin_y!r}"]
        for dx, dy in self.displacements.reshape(-1, 2):
            lines.append(f"{float(dx)!r} {float(dy)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FFDGrid":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty grid file")
        head = lines[0].split()
        if len(head) != 6:
            raise ValueError("grid header must be 'nx ny sx sy origin_x origin_y'")
        try:
            nx, ny = int(head[0]), int(head[1])
            sx, sy, ox, oy = (float(v) for v in head[2:])
        except ValueError as exc:
            raise ValueError(f"malformed grid header {lines[0]!r}") from exc
        if len(lines) - 1 != nx * ny:
            raise ValueError(f"grid file declares {nx * ny} control points but has {len(lines) - 1}")
        try:
            vals = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
        except ValueError as exc:
            raise ValueError("grid displacement lines must hold two numbers") from exc
        if vals.shape != (nx * ny, 2):
            raise ValueError("each grid line must hold exactly 'dx dy'")
        return cls(vals.reshape(ny, nx, 2), sx, sy, ox, oy)


def ffd_transform_point(grid: FFDGrid, x, y):
    """Map ``(x, y)`` through the FFD: point plus blended control displacement.

    Works on scalars or arrays; raises :class:`GridError` outside the
    lattice's coverage.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(grid.covers(x, y)):
        raise GridError("point outside the domain covered by the control lattice")
    i, j, u, v = grid._index(x, y)
    bu = _basis_all(u)
    bv = _basis_all(v)
    d = grid.displacements
    ox = np.zeros_like(x)
    oy = np.zeros_like(y)
    for l in range(4):
        for m in range(4):
            w = bu[l] * bv[m]
            phi = d[j + m, i + l]
            ox = ox + w * phi[..., 0]
            oy = oy + w * phi[..., 1]
    xo, yo = x + ox, y + oy
    if xo.ndim == 0:
        return float(xo), float(yo)
    return xo, yo


def invert_ffd_points(grid: FFDGrid, points, iters: int = 50, tol: float = 1e-9) -> np.ndarray:
    """Solve ``T(q) = p`` for each point by fixed-point iteration ``q <- p - D(q)``.

    Converges when the displacement field is a contraction, which holds for
    the small, smooth deformations registration produces.
    """
    p = np.asarray(points, dtype=np.float64)
    q = p.copy()
    for _ in range(iters):
        tx, ty = ffd_transform_point(grid, q[..., 0], q[..., 1])
        resid = np.stack([tx, ty], axis=-1) - p
        q = q - resid
        if np.max(np.abs(resid)) < tol:
            break
    return q


@dataclass(frozen=True)
class PatternIntensityParams:
    r: int = 3
    sigma: float = 10.0

    def __post_init__(self):
        if int(self.r) != self.r or self.r < 1:
            raise ValueError("pattern-intensity radius must be an integer >= 1")
        if not self.sigma > 0:
            raise ValueError("pattern-intensity sigma must be positive")


@lru_cache(maxsize=16)
def _disk_offsets(r: int) -> tuple[tuple[int, int], ...]:
    """Half-disk offsets ``(dy, dx)``; each unordered neighbour pair appears once."""
    out = []
    for dy in range(0, r + 1):
        for dx in range(-r, r + 1):
            if dx * dx + dy * dy > r * r:
                continue
            if dy == 0 and dx <= 0:
                continue
            out.append((dy, dx))
    return tuple(out)


@lru_cache(maxsize=16)
def _neighbour_counts(h: int, w: int, r: int) -> np.ndarray:
    counts = np.ones((h, w))
    for dy, dx in _disk_offsets(r):
        a, b = _pair_slices(h, w, dy, dx)
        counts[a] += 1
        counts[b] += 1
    counts.setflags(write=False)
    return counts


def _pair_slices(h: int, w: int, dy: int, dx: int):
    # slice ``a`` addresses pixels p, slice ``b`` the neighbours p + (dy, dx)
    ya, yb = slice(0, h - dy), slice(dy, h)
    if dx >= 0:
        xa, xb = slice(0, w - dx), slice(dx, w)
    else:
        xa, xb = slice(-dx, w), slice(0, w + dx)
    return (ya, xa), (yb, xb)


def pattern_intensity_terms(diff: np.ndarray, p: PatternIntensityParams) -> np.ndarray:
    """Per-pixel neighbourhood average of ``s^2 / (s^2 + (d_p - d_q)^2)``.

    The neighbourhood is the disk of radius ``r`` (self included) clipped
    to the image.
    """
    h, w = diff.shape
    s2 = float(p.sigma) ** 2
    acc = np.ones((h, w))
    for dy, dx in _disk_offsets(p.r):
        a, b = _pair_slices(h, w, dy, dx)
        t = diff[a] - diff[b]
        val = s2 / (s2 + t * t)
        acc[a] += val
        acc[b] += val
    return acc / _neighbour_counts(h, w, p.r)


def pattern_intensity(a: Image2D, b: Image2D, p: PatternIntensityParams | None = None) -> float:
    """Pattern intensity of the difference image ``a - b``; lies in (0, 1]."""
    p = p or PatternIntensityParams()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    return float(np.mean(pattern_intensity_terms(a.data - b.data, p)))


def _bending_density(grid: FFDGrid, width: int, height: int, component=None) -> np.ndarray:
    Wx0, Wx1, Wx2 = (grid.axis_weights(width, "x", k) for k in range(3))
    Wy0, Wy1, Wy2 = (grid.axis_weights(height, "y", k) for k in range(3))
    comps = (0, 1) if component is None else (component,)
    dens = np.zeros((height, width))
    for c in comps:
        phi = grid.displacements[:, :, c]
        dxx = Wy0 @ phi @ Wx2.T
        dyy = Wy2 @ phi @ Wx0.T
        dxy = Wy1 @ phi @ Wx1.T
        dens += dxx * dxx + 2 * dxy * dxy + dyy * dyy
    return dens


def bending_energy(grid: FFDGrid, img_w: int, img_h: int) -> float:
    """Thin-plate bending energy of the displacement field, averaged over pixels.

    Second derivatives come from the analytic B-spline derivatives at every
    pixel position; both displacement components are summed.
    """
    grid.check_covers(img_w, img_h)
    return float(np.mean(_bending_density(grid, img_w, img_h)))


# -- similarity terms -------------------------------------------------------


class Similarity:
    """Similarity cost between a fixed image and a warped moving image.

    ``radius`` is the reach of a pixel change into the per-pixel cost map
    when the cost is a pixel mean (``None`` for global costs).
    """

    name = "abstract"
    radius: int | None = None

    def cost(self, fixed: np.ndarray, warped: np.ndarray) -> float:
        raise NotImplementedError

    def cost_map(self, fixed: np.ndarray, warped: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class PatternIntensityCost(Similarity):
    name = "pi"

    def __init__(self, params: PatternIntensityParams):
        self.params = params
        self.radius = params.r

    def cost_map(self, fixed, warped):
        return 1.0 - pattern_intensity_terms(fixed - warped, self.params)

    def cost(self, fixed, warped):
        return 1.0 - float(np.mean(pattern_intensity_terms(fixed - warped, self.params)))


class SSDCost(Similarity):
    """Mean squared difference divided by the squared intensity range of ``fixed``."""

    name = "ssd"
    radius = 0

    def __init__(self, fixed: np.ndarray):
        rng = float(np.ptp(fixed))
        self.norm = rng * rng if rng > 0 else 1.0

    def cost_map(self, fixed, warped):
        d = fixed - warped
        return d * d / self.norm

    def cost(self, fixed, warped):
        return float(np.mean(self.cost_map(fixed, warped)))


class NCCCost(Similarity):
    name = "ncc"

    def cost(self, fixed, warped):
        return 1.0 - _ncc_arrays(fixed, warped)


class NMICost(Similarity):
    name = "nmi"

    def __init__(self, bins: int = 32):
        self.bins = bins

    def cost(self, fixed, warped):
        from .metrics import nmi_arrays

        return 2.0 - nmi_arrays(fixed, warped, self.bins)


METRICS = ("pi", "ssd", "ncc", "nmi")


@dataclass(frozen=True)
class FFDConfig:
    lambda_: float = 0.2
    pi_params: PatternIntensityParams = field(default_factory=PatternIntensityParams)
    spacing_x: float = 8.0
    spacing_y: float = 8.0
    max_iters: int = 100
    step_size: float = 1.0
    step_tolerance: float = 1e-6
    fd_delta: float = 0.5
    min_step: float = 0.01
    metric: str = "pi"
    nmi_bins: int = 32

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError("lambda must be non-negative")
        if self.metric not in METRICS:
            raise ValueError(f"unknown similarity metric {self.metric!r}; choose from {METRICS}")
        if self.max_iters < 0 or self.fd_delta <= 0 or self.step_size <= 0:
            raise ValueError("max_iters >= 0, fd_delta > 0 and step_size > 0 required")

    def similarity(self, fixed: np.ndarray) -> Similarity:
        if self.metric == "pi":
            return PatternIntensityCost(self.pi_params)
        if self.metric == "ssd":
            return SSDCost(fixed)
        if self.metric == "ncc":
            return NCCCost()
        return NMICost(self.nmi_bins)


def ffd_cost(fixed: Image2D, moving: Image2D, grid: FFDGrid, cfg: FFDConfig | None = None) -> float:
    """Similarity cost of the warped moving image plus ``lambda`` times bending energy."""
    cfg = cfg or FFDConfig()
    if fixed.shape != moving.shape:
        raise ValueError(f"dimension mismatch {fixed.shape} vs {moving.shape}")
    warped = warp_ffd(moving, grid)
    sim = cfg.similarity(fixed.data).cost(fixed.data, warped.data)
    return sim + cfg.lambda_ * bending_energy(grid, fixed.width, fixed.height)


class _CostModel:
    """Cost evaluation and finite-difference gradients for one image pair."""

    def __init__(self, fixed: Image2D, moving: Image2D, template: FFDGrid, cfg: FFDConfig):
        self.fixed = fixed.data
        self.moving = moving
        self.cfg = cfg
        self.sim = cfg.similarity(fixed.data)
        self.template = template
        h, w = fixed.shape
        self.h, self.w, self.n = h, w, h * w
        self.xs, self.ys = pixel_grid(w, h)
        self.W = {(ax, k): template.axis_weights(w if ax == "x" else h, ax, k) for ax in "xy" for k in range(3)}

    def field(self, d: np.ndarray, c: int) -> np.ndarray:
        return self.W["y", 0] @ d[:, :, c] @ self.W["x", 0].T

    def warped(self, d: np.ndarray) -> np.ndarray:
        return bilinear_sample(self.moving, self.xs + self.field(d, 0), self.ys + self.field(d, 1))

    def bending_density(self, d: np.ndarray, c: int) -> np.ndarray:
        phi = d[:, :, c]
        W = self.W
        dxx = W["y", 0] @ phi @ W["x", 2].T
        dyy = W["y", 2] @ phi @ W["x", 0].T
        dxy = W["y", 1] @ phi @ W["x", 1].T
        return dxx * dxx + 2 * dxy * dxy + dyy * dyy

    def cost(self, d: np.ndarray) -> float:
        sim = self.sim.cost(self.fixed, self.warped(d))
        bend = (np.sum(self.bending_density(d, 0)) + np.sum(self.bending_density(d, 1))) / self.n
        return float(sim + self.cfg.lambda_ * bend)

    def gradient(self, d: np.ndarray, delta: float) -> np.ndarray:
        if self.sim.radius is None:
            return self._gradient_global(d, delta)
        return self._gradient_local(d, delta)

    def _gradient_global(self, d: np.ndarray, delta: float) -> np.ndarray:
        g = np.zeros_like(d)
        for idx in np.ndindex(d.shape):
            e = np.zeros_like(d)
            e[idx] = delta
            g[idx] = (self.cost(d + e) - self.cost(d - e)) / (2 * delta)
        return g

    def _support_boxes(self, radius: int):
        """Per control point pixel box ``[lo, hi)`` of its support dilated by ``radius``."""
        t = self.template
        boxes = []
        for origin, s, nc, size in ((t.origin_x, t.spacing_x, t.nx, self.w), (t.origin_y, t.spacing_y, t.ny, self.h)):
            pos = origin + s * np.arange(nc)
            lo = np.clip(np.ceil(pos - 2 * s).astype(int) - radius, 0, size)
            hi = np.clip(np.floor(pos + 2 * s).astype(int) + radius + 1, 0, size)
            boxes.append((lo, hi))
        return boxes

    def _gradient_local(self, d: np.ndarray, delta: float) -> np.ndarray:
        # Control points whose dilated supports are disjoint are perturbed
        # together; each one's cost change is confined to its own box, so
        # the box sums give exactly the per-point central differences.
        t = self.template
        r = self.sim.radius
        stride_x = 4 + int(math.floor(2 * r / t.spacing_x)) + 1
        stride_y = 4 + int(math.floor(2 * r / t.spacing_y)) + 1
        (xlo, xhi), (ylo, yhi) = self._support_boxes(r)
        lam = self.cfg.lambda_
        g = np.zeros_like(d)
        for oy in range(stride_y):
            for ox in range(stride_x):
                jj = np.arange(oy, t.ny, stride_y)
                ii = np.arange(ox, t.nx, stride_x)
                for c in (0, 1):
                    sums = []
                    for sign in (1.0, -1.0):
                        dp = d.copy()
                        dp[np.ix_(jj, ii, [c])] += sign * delta
                        total = self.sim.cost_map(self.fixed, self.warped(dp))
                        if lam:
                            total = total + lam * self.bending_density(dp, c)
                        S = np.zeros((self.h + 1, self.w + 1))
                        S[1:, 1:] = total.cumsum(0).cumsum(1)
                        y0, y1 = ylo[jj][:, None], yhi[jj][:, None]
                        x0, x1 = xlo[ii][None, :], xhi[ii][None, :]
                        sums.append(S[y1, x1] - S[y0, x1] - S[y1, x0] + S[y0, x0])
                    g[np.ix_(jj, ii, [c])] = ((sums[0] - sums[1]) / (2 * delta * self.n))[:, :, None]
        return g


@dataclass
class FFDResult:
    grid: FFDGrid
    cost_history: list[float]
    iterations: int


def optimize_ffd(fixed: Image2D, moving: Image2D, cfg: FFDConfig | None = None) -> FFDGrid:
    return optimize_ffd_detailed(fixed, moving, cfg).grid


def optimize_ffd_detailed(
    fixed: Image2D, moving: Image2D, cfg: FFDConfig | None = None, init: FFDGrid | None = None
) -> FFDResult:
    """Gradient descent on all control displacements with backtracking.

    The descent direction is the negative finite-difference gradient scaled
    so the largest control-point move equals the current step (pixels).
    A step is accepted only if it lowers the cost, so the recorded cost
    history is non-increasing.
    """
    cfg = cfg or FFDConfig()
    if fixed.shape != moving.shape:
        raise ValueError(f"dimension mismatch {fixed.shape} vs {moving.shape}")
    grid = init or FFDGrid.for_image(fixed.width, fixed.height, cfg.spacing_x, cfg.spacing_y)
    grid.check_covers(fixed.width, fixed.height)
    model = _CostModel(fixed, moving, grid, cfg)
    d = np.array(grid.displacements)
    f = model.cost(d)
    history = [f]
    step = cfg.step_size
    it = 0
    for it in range(1, cfg.max_iters + 1):
        g = model.gradient(d, cfg.fd_delta)
        gmax = float(np.max(np.hypot(g[:, :, 0], g[:, :, 1])))
        if gmax == 0.0:
            break
        direction = -g / gmax
        accepted = False
        while step >= cfg.min_step:
            cand = d + step * direction
            fc = model.cost(cand)
            if fc < f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        decrease = f - fc
        d, f = cand, fc
        history.append(f)
        step = min(2.0 * step, cfg.step_size)
        if decrease < cfg.step_tolerance:
            break
    log.debug("ffd descent (%s): %d iterations, cost %.6f", cfg.metric, it, f)
    return FFDResult(grid.with_displacements(d), history, it)
