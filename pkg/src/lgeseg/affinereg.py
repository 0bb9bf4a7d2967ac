"""Constrained affine registration by NCC maximization.

The transform maps cine (moving) pixel coordinates to LGE (fixed) pixel
coordinates; :func:`~lgeseg.imagecore.warp_affine` resamples with its
inverse. Scales and translations are box-constrained, shears are free.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .imagecore import Image2D, warp_affine

log = logging.getLogger(__name__)


class RegistrationError(ValueError):
    pass


@dataclass(frozen=True)
class AffineTransform2D:
    a11: float = 1.0
    a12: float = 0.0
    a13: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    a23: float = 0.0

    @classmethod
    def identity(cls) -> "AffineTransform2D":
        return cls()

    @classmethod
    def from_params(cls, p) -> "AffineTransform2D":
        return cls(*(float(v) for v in p))

    @classmethod
    def from_matrix(cls, m) -> "AffineTransform2D":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[0, 0], m[0, 1], m[0, 2], m[1, 0], m[1, 1], m[1, 2])

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform2D":
        return cls(a13=tx, a23=ty)

    def params(self) -> np.ndarray:
        return np.array([self.a11, self.a12, self.a13, self.a21, self.a22, self.a23])

    def matrix(self) -> np.ndarray:
        return np.array([[self.a11, self.a12, self.a13], [self.a21, self.a22, self.a23], [0.0, 0.0, 1.0]])

    def determinant(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    def is_identity(self) -> bool:
        return self == AffineTransform2D()

    def inverse_matrix(self) -> np.ndarray:
        det = self.determinant()
        if not np.isfinite(det) or abs(det) < 1e-12:
            raise RegistrationError(f"affine transform is singular (det={det})")
        return np.linalg.inv(self.matrix())

    def apply(self, points) -> np.ndarray:
        """Map an ``(n, 2)`` array of ``(x, y)`` points."""
        p = np.asarray(points, dtype=np.float64)
        x, y = p[..., 0], p[..., 1]
        return np.stack([self.a11 * x + self.a12 * y + self.a13, self.a21 * x + self.a22 * y + self.a23], axis=-1)

    def is_feasible(self, cfg: "AffineConfig") -> bool:
        return (
            abs(self.a11 - 1) < cfg.eps_scale
            and abs(self.a22 - 1) < cfg.eps_scale
            and abs(self.a13) < cfg.eps_translate
            and abs(self.a23) < cfg.eps_translate
        )

    def to_text(self) -> str:
        return " ".join(repr(float(v)) for v in self.params()) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AffineTransform2D":
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        if len(lines) != 1:
            raise ValueError("affine file must contain exactly one line of 6 values")
        parts = lines[0].split()
        if len(parts) != 6:
            raise ValueError(f"affine line needs 6 values, got {len(parts)}")
        try:
            vals = [float(v) for v in parts]
        except ValueError as exc:
            raise ValueError(f"affine values must be numbers: {lines[0]!r}") from exc
        if not all(np.isfinite(vals)):
            raise ValueError("affine values must be finite")
        return cls(*vals)


@dataclass(frozen=True)
class AffineConfig:
    eps_scale: float = 0.1
    eps_translate: float = 10.0
    max_iters: int = 200
    step_tolerance: float = 1e-12
    scale_delta: float = 1e-3
    translate_delta: float = 1e-2

    def __post_init__(self):
        if not (self.eps_scale > 0 and self.eps_translate > 0):
            raise ValueError("eps_scale and eps_translate must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


def ncc(a: Image2D, b: Image2D) -> float:
    """Pearson correlation of the two intensity vectors."""
    if a.shape != b.shape:
        raise RegistrationError(f"dimension mismatch {a.shape} vs {b.shape}")
    return _ncc_arrays(a.data, b.data)


def _ncc_arrays(a: np.ndarray, b: np.ndarray) -> float:
    za = a - a.mean()
    zb = b - b.mean()
    na = np.sqrt(np.sum(za * za))
    nb = np.sqrt(np.sum(zb * zb))
    if na == 0 or nb == 0:
        raise RegistrationError("NCC undefined for a zero-variance image")
    return float(np.clip(np.sum(za * zb) / (na * nb), -1.0, 1.0))


def project_constraints(A: AffineTransform2D, cfg: AffineConfig) -> AffineTransform2D:
    """Clamp scales and translations strictly inside the feasible box."""
    lo_s = np.nextafter(1.0 - cfg.eps_scale, np.inf)
    hi_s = np.nextafter(1.0 + cfg.eps_scale, -np.inf)
    t = np.nextafter(cfg.eps_translate, 0.0)
    return replace(
        A,
        a11=float(min(max(A.a11, lo_s), hi_s)),
        a22=float(min(max(A.a22, lo_s), hi_s)),
        a13=float(min(max(A.a13, -t), t)),
        a23=float(min(max(A.a23, -t), t)),
    )


@dataclass
class AffineResult:
    transform: AffineTransform2D
    ncc_history: list[float] = field(default_factory=list)
    iterations: int = 0


def estimate_affine(fixed: Image2D, moving: Image2D, cfg: AffineConfig | None = None) -> AffineTransform2D:
    """Find the feasible affine maximizing ``ncc(fixed, warp_affine(moving, A))``."""
    return estimate_affine_detailed(fixed, moving, cfg).transform


def estimate_affine_detailed(fixed: Image2D, moving: Image2D, cfg: AffineConfig | None = None) -> AffineResult:
    """Box-constrained quasi-Newton ascent (L-BFGS-B) on the six entries.

    Gradients are central finite differences on the matrix entries. The
    linear entries are scaled by the image half-size so that unit changes
    in any optimizer coordinate move pixels by about one pixel.
    """
    cfg = cfg or AffineConfig()
    if fixed.shape != moving.shape:
        raise RegistrationError(f"dimension mismatch {fixed.shape} vs {moving.shape}")
    # validates both images are non-constant
    ncc(fixed, moving)

    half = 0.5 * max(fixed.width, fixed.height)
    scale = np.array([half, half, 1.0, half, half, 1.0])
    delta = np.array([cfg.scale_delta, cfg.scale_delta, cfg.translate_delta] * 2)

    lo_s = np.nextafter(1.0 - cfg.eps_scale, np.inf)
    hi_s = np.nextafter(1.0 + cfg.eps_scale, -np.inf)
    t = np.nextafter(cfg.eps_translate, 0.0)
    lower = np.array([lo_s, -np.inf, -t, -np.inf, lo_s, -t])
    upper = np.array([hi_s, np.inf, t, np.inf, hi_s, t])

    cache: dict[bytes, float] = {}

    def objective(p: np.ndarray) -> float:
        p = np.clip(p, lower, upper)
        key = p.tobytes()
        if key not in cache:
            cache[key] = ncc(fixed, warp_affine(moving, AffineTransform2D.from_params(p)))
        return cache[key]

    def neg_and_grad(z: np.ndarray):
        p = z / scale
        grad = np.empty(6)
        for k in range(6):
            e = np.zeros(6)
            e[k] = delta[k]
            grad[k] = (objective(p + e) - objective(p - e)) / (2 * delta[k])
        return -objective(p), -grad / scale

    p0 = AffineTransform2D.identity().params()
    history = [objective(p0)]
    best = [p0, history[0]]

    def record(z: np.ndarray):
        p = np.clip(z / scale, lower, upper)
        f = objective(p)
        history.append(f)
        if f >= best[1]:
            best[0], best[1] = p, f

    res = minimize(
        neg_and_grad,
        p0 * scale,
        jac=True,
        method="L-BFGS-B",
        bounds=list(zip(lower * scale, upper * scale)),
        callback=record,
        options={"maxiter": cfg.max_iters, "ftol": cfg.step_tolerance, "gtol": 1e-9, "maxls": 40},
    )
    record(res.x)
    A = project_constraints(AffineTransform2D.from_params(best[0]), cfg)
    log.debug("affine search: %d iterations, ncc=%.6f (%s)", res.nit, best[1], res.message)
    return AffineResult(A, history, int(res.nit))
