"""Synthetic cine/LGE short-axis phantoms with known ground truth.

The anatomy is defined in LGE pixel coordinates: a disk of blood pool
inside an annulus of myocardium on a uniform background, with an optional
sub-endocardial scar wedge in the LGE image only. The cine image is the
same anatomy seen through a known misalignment ``G`` (cine -> LGE
coordinates): ``cine(y) = anatomy(G(y))`` with
``G(y) = A (y + bumps(y))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .affinereg import AffineTransform2D
from .contour import Contour, circle_contour
from .imagecore import Image2D


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Bump:
    """Gaussian displacement bump centered at ``(x, y)`` (cine coordinates)."""

    x: float
    y: float
    dx: float
    dy: float
    width: float = 12.0


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 128
    height: int = 128
    center_x: float = 64.0
    center_y: float = 64.0
    endo_radius: float = 18.0
    epi_radius: float = 28.0
    blood: float = 180.0
    myocardium: float = 60.0
    scar: float = 140.0
    background: float = 100.0
    scar_angle: float = 0.0
    scar_extent: float = 0.0
    scar_depth: float = 0.5
    noise_sigma: float = 0.0
    affine: tuple[float, ...] = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
    bumps: tuple[Bump, ...] = ()
    lge_gain: float = 1.0
    lge_offset: float = 0.0
    spacing: float = 1.0
    vertices: int = 80
    supersample: int = 4

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise PhantomError("phantom must be at least 8x8 pixels")
        if not 0 < self.endo_radius < self.epi_radius:
            raise PhantomError("need 0 < endo_radius < epi_radius")
        if len({self.blood, self.myocardium, self.scar, self.background}) < 4:
            raise PhantomError("blood, myocardium, scar and background intensities must be distinct")
        if not 0 < self.scar_depth <= 1:
            raise PhantomError("scar_depth is a transmural fraction in (0, 1]")
        if not 0 <= self.scar_extent <= 360:
            raise PhantomError("scar_extent is an angle in degrees within [0, 360]")
        if self.noise_sigma < 0 or self.supersample < 1 or self.vertices < 8:
            raise PhantomError("noise_sigma >= 0, supersample >= 1, vertices >= 8 required")
        if len(self.affine) != 6:
            raise PhantomError("affine needs 6 values")
        A = AffineTransform2D.from_params(self.affine)
        A.inverse_matrix()
        cx, cy, r = self.center_x, self.center_y, self.epi_radius
        if cx - r < 1 or cy - r < 1 or cx + r > self.width - 2 or cy + r > self.height - 2:
            raise PhantomError("epicardium must fit inside the image")

    @property
    def transform(self) -> AffineTransform2D:
        return AffineTransform2D.from_params(self.affine)

    @property
    def has_scar(self) -> bool:
        return self.scar_extent > 0

    def scar_outer_radius(self) -> float:
        return self.endo_radius + self.scar_depth * (self.epi_radius - self.endo_radius)

    def scar_area(self) -> float:
        """Analytic area of the scar annular sector in pixels."""
        r1, r2 = self.endo_radius, self.scar_outer_radius()
        return 0.5 * np.deg2rad(self.scar_extent) * (r2 * r2 - r1 * r1)

    # key=value text form used by the CLI

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "affine":
                out.append("affine=" + " ".join(repr(float(x)) for x in v))
            elif f.name == "bumps":
                for b in v:
                    out.append(f"bump={b.x!r} {b.y!r} {b.dx!r} {b.dy!r} {b.width!r}")
            else:
                out.append(f"{f.name}={v!r}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PhantomSpec":
        kinds = {f.name: f.type for f in fields(cls)}
        kw: dict = {}
        bumps = []
        for n, ln in enumerate(text.splitlines(), 1):
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            key, sep, value = ln.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise PhantomError(f"line {n}: expected key=value")
            try:
                if key == "bump":
                    bumps.append(Bump(*(float(v) for v in value.split())))
                elif key == "affine":
                    kw["affine"] = tuple(float(v) for v in value.split())
                elif key in ("width", "height", "vertices", "supersample"):
                    kw[key] = int(value)
                elif key in kinds:
                    kw[key] = float(value)
                else:
                    raise PhantomError(f"line {n}: unknown phantom key {key!r}")
            except (TypeError, ValueError) as exc:
                if isinstance(exc, PhantomError):
                    raise
                raise PhantomError(f"line {n}: bad value for {key!r}: {value!r}") from exc
        if bumps:
            kw["bumps"] = tuple(bumps)
        return cls(**kw)


@dataclass
class PhantomCase:
    cine: Image2D
    lge: Image2D
    true_endo: Contour
    true_epi: Contour
    prior_endo: Contour
    prior_epi: Contour
    scar_mask: np.ndarray
    spec: PhantomSpec = field(repr=False)


def _bump_field(spec: PhantomSpec, x: np.ndarray, y: np.ndarray):
    bx = np.zeros_like(x)
    by = np.zeros_like(y)
    for b in spec.bumps:
        g = np.exp(-((x - b.x) ** 2 + (y - b.y) ** 2) / (2 * b.width**2))
        bx += b.dx * g
        by += b.dy * g
    return bx, by


def cine_to_lge(spec: PhantomSpec, x, y):
    """The phantom's ground-truth map ``G`` from cine to LGE coordinates."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    bx, by = _bump_field(spec, x, y)
    p = spec.transform.apply(np.stack([x + bx, y + by], axis=-1))
    return p[..., 0], p[..., 1]


def lge_to_cine(spec: PhantomSpec, points, iters: int = 100) -> np.ndarray:
    """Invert ``G`` on an ``(n, 2)`` array of LGE points."""
    p = np.asarray(points, dtype=np.float64)
    target = AffineTransform2D.from_matrix(spec.transform.inverse_matrix()).apply(p)
    q = target.copy()
    for _ in range(iters):
        bx, by = _bump_field(spec, q[:, 0], q[:, 1])
        nq = target - np.stack([bx, by], axis=1)
        if np.max(np.abs(nq - q)) < 1e-12:
            q = nq
            break
        q = nq
    return q


def _classify(spec: PhantomSpec, x: np.ndarray, y: np.ndarray, with_scar: bool) -> np.ndarray:
    dx, dy = x - spec.center_x, y - spec.center_y
    rho = np.hypot(dx, dy)
    out = np.full(x.shape, spec.background)
    out[rho <= spec.epi_radius] = spec.myocardium
    out[rho <= spec.endo_radius] = spec.blood
    if with_scar and spec.has_scar:
        out[_scar_region(spec, x, y)] = spec.scar
    return out


def _scar_region(spec: PhantomSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    dx, dy = x - spec.center_x, y - spec.center_y
    rho = np.hypot(dx, dy)
    ang = np.rad2deg(np.arctan2(dy, dx))
    rel = (ang - spec.scar_angle + 180.0) % 360.0 - 180.0
    return (rho > spec.endo_radius) & (rho <= spec.scar_outer_radius()) & (np.abs(rel) <= spec.scar_extent / 2)


def _render(spec: PhantomSpec, mapping, with_scar: bool) -> np.ndarray:
    ss = spec.supersample
    sub = (np.arange(ss) + 0.5) / ss - 0.5
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    acc = np.zeros_like(xs)
    for oy in sub:
        for ox in sub:
            px, py = mapping(xs + ox, ys + oy)
            acc += _classify(spec, px, py, with_scar)
    return acc / ss**2


def make_phantom(spec: PhantomSpec, seed: int = 0) -> PhantomCase:
    """Render a cine/LGE pair, their contours and the scar mask.

    Noise is additive Gaussian from ``numpy.random.default_rng(seed)``,
    drawn for the cine image first.
    """
    ident = lambda x, y: (x, y)  # noqa: E731
    lge_clean = _render(spec, ident, with_scar=True)
    cine_clean = _render(spec, lambda x, y: cine_to_lge(spec, x, y), with_scar=False)
    lge_clean = spec.lge_gain * lge_clean + spec.lge_offset

    rng = np.random.default_rng(seed)
    if spec.noise_sigma > 0:
        cine_clean = cine_clean + rng.normal(0.0, spec.noise_sigma, cine_clean.shape)
        lge_clean = lge_clean + rng.normal(0.0, spec.noise_sigma, lge_clean.shape)

    # pixel-centre membership, the same convention as metrics.rasterize
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    scar_mask = _scar_region(spec, xs, ys) if spec.has_scar else np.zeros(xs.shape, dtype=bool)
    c = (spec.center_x, spec.center_y)
    true_endo = circle_contour(c, spec.endo_radius, spec.vertices, "endo")
    true_epi = circle_contour(c, spec.epi_radius, spec.vertices, "epi")
    prior_endo = Contour(lge_to_cine(spec, true_endo.vertices), "endo")
    prior_epi = Contour(lge_to_cine(spec, true_epi.vertices), "epi")
    return PhantomCase(
        cine=Image2D(cine_clean, spec.spacing, spec.spacing),
        lge=Image2D(lge_clean, spec.spacing, spec.spacing),
        true_endo=true_endo,
        true_epi=true_epi,
        prior_endo=prior_endo,
        prior_epi=prior_epi,
        scar_mask=scar_mask,
        spec=spec,
    )
