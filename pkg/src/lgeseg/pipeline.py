"""Coarse-to-fine segmentation of an LGE slice from cine prior contours.

Stages, each leaving a contour pair behind:

* ``b`` priors overlaid after resolution, histogram and size normalization
* ``c`` after constrained affine registration
* ``d`` after B-spline FFD registration
* ``e`` after local force-driven contour deformation
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fileio
from .affinereg import AffineTransform2D, estimate_affine
from .config import PipelineConfig
from .contour import Contour, ContourPair, deform, resample_closed
from .ffdreg import METRICS, FFDGrid, invert_ffd_points, optimize_ffd_detailed
from .imagecore import Image2D, center_fit, histogram_specify, resample, warp_affine, warp_ffd
from .metrics import EvalReport, contour_distance, evaluate_pair
from .phantom import PhantomCase

log = logging.getLogger(__name__)

STAGES = ("b", "c", "d", "e")


class StageError(RuntimeError):
    """A pipeline failure tagged with the stage it happened in."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class CasePair:
    cine_image_path: Path
    lge_image_path: Path
    cine_endo_path: Path
    cine_epi_path: Path
    case_id: str


def read_manifest(path) -> list[CasePair]:
    """Tab-separated ``cine lge endo epi id`` lines; paths relative to the manifest."""
    path = Path(path)
    cases = []
    for n, ln in enumerate(path.read_text().splitlines(), 1):
        if not ln.strip() or ln.lstrip().startswith("#"):
            continue
        parts = ln.rstrip("\n").split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}:{n}: expected 5 tab-separated fields, got {len(parts)}")
        cine, lge, endo, epi, cid = (p.strip() for p in parts)
        cases.append(CasePair(*(path.parent / p for p in (cine, lge, endo, epi)), cid))
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate case identifiers")
    return cases


def transform_contour(contour: Contour, transform) -> Contour:
    """Carry a contour from the moving (cine) frame into the fixed (LGE) frame.

    For an affine transform this is the matrix applied to each vertex. An
    FFD grid stores the backward resampling map, so the vertices go through
    its inverse: a vertex ``q`` moves to the ``p`` with ``T(p) = q``.
    """
    if isinstance(transform, AffineTransform2D):
        return contour.moved(transform.apply(contour.vertices))
    if isinstance(transform, FFDGrid):
        return contour.moved(invert_ffd_points(transform, contour.vertices))
    raise TypeError(f"unsupported transform {type(transform).__name__}")


def _pair_of(endo: Contour, epi: Contour) -> ContourPair:
    return ContourPair.from_contours(endo, epi)


@dataclass
class Normalized:
    cine: Image2D
    lge: Image2D
    endo: Contour
    epi: Contour


def normalize(cine: Image2D, lge: Image2D, endo: Contour, epi: Contour, cfg: PipelineConfig) -> Normalized:
    """Bring the cine image and its contours onto the LGE pixel grid.

    The cine image is resampled to the LGE spacing and centred to the LGE
    size; the LGE histogram is specified toward the cine histogram.
    Contours are resampled to ``cfg.vertices`` equally spaced vertices.
    """
    fx = cine.spacing_x / lge.spacing_x
    fy = cine.spacing_y / lge.spacing_y
    cine_r = resample(cine, lge.spacing_x, lge.spacing_y)
    cine_f, (dx, dy) = center_fit(cine_r, lge.width, lge.height)
    lge_s = histogram_specify(lge, cine_f, cfg.histogram_bins)

    def carry(c: Contour) -> Contour:
        v = c.vertices * np.array([fx, fy]) + np.array([dx, dy], dtype=np.float64)
        return Contour(resample_closed(v, cfg.vertices), c.kind)

    return Normalized(cine_f, lge_s, carry(endo), carry(epi))


@dataclass
class CaseResult:
    case_id: str
    stages: dict[str, ContourPair]
    affine: AffineTransform2D
    grid: FFDGrid
    images: dict[str, Image2D]
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def final(self) -> ContourPair:
        return self.stages["e"]


def segment(cine: Image2D, lge: Image2D, endo: Contour, epi: Contour, cfg: PipelineConfig | None = None, case_id: str = "case") -> CaseResult:
    """Run all stages in memory and return per-stage contours and intermediates."""
    cfg = cfg or PipelineConfig()
    timings: dict[str, float] = {}
    stages: dict[str, ContourPair] = {}

    def timed(stage, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
        finally:
            timings[stage] = timings.get(stage, 0.0) + time.perf_counter() - t0

    norm = timed("normalize", lambda: normalize(cine, lge, endo, epi, cfg))
    stages["b"] = timed("normalize", lambda: _pair_of(norm.endo, norm.epi))

    A = timed("affine", lambda: estimate_affine(norm.lge, norm.cine, cfg.affine))
    cine_aff = warp_affine(norm.cine, A)
    stages["c"] = timed("affine", lambda: _pair_of(transform_contour(norm.endo, A), transform_contour(norm.epi, A)))

    ffd = timed("ffd", lambda: optimize_ffd_detailed(norm.lge, cine_aff, cfg.ffd))
    cine_ffd = warp_ffd(cine_aff, ffd.grid)
    c = stages["c"]
    stages["d"] = timed(
        "ffd", lambda: _pair_of(transform_contour(c.endo, ffd.grid), transform_contour(c.epi, ffd.grid))
    )

    stages["e"] = timed("contour", lambda: deform(stages["d"], norm.lge, cfg.forces))
    log.info("case %s done in %.1fs", case_id, sum(timings.values()))
    return CaseResult(
        case_id,
        stages,
        A,
        ffd.grid,
        {"cine_norm": norm.cine, "lge_norm": norm.lge, "cine_affine": cine_aff, "cine_ffd": cine_ffd},
        timings,
    )


def write_case(result: CaseResult, out_dir) -> Path:
    """Persist every stage output of one case under ``out_dir/<case_id>``."""
    d = Path(out_dir) / result.case_id
    for name, img in result.images.items():
        fileio.write_pgm(d / f"{name}.pgm", img)
    fileio.write_affine(d / "affine.aff", result.affine)
    fileio.write_grid(d / "ffd.ffd", result.grid)
    for stage, pair in result.stages.items():
        fileio.write_pair(d, pair.endo, pair.epi, stem=f"stage_{stage}_")
    fileio.write_pair(d, result.final.endo, result.final.epi)
    # timings are logged, not written, so reruns produce identical files
    log.info("case %s timings: %s", result.case_id, ", ".join(f"{k}={v:.2f}s" for k, v in result.timings.items()))
    return d


def run_case(case: CasePair, cfg: PipelineConfig | None = None, out_dir=None) -> CaseResult:
    """Load one manifest case, segment it, and write its outputs when ``out_dir`` is set."""
    cfg = cfg or PipelineConfig()
    try:
        cine = fileio.read_pgm(case.cine_image_path)
        lge = fileio.read_pgm(case.lge_image_path)
        endo = fileio.read_contour(case.cine_endo_path)
        epi = fileio.read_contour(case.cine_epi_path)
    except (OSError, ValueError) as exc:
        raise StageError("load", str(exc)) from exc
    for c in (endo, epi):
        v = c.vertices
        if np.any(v < 0) or np.any(v[:, 0] > cine.width - 1) or np.any(v[:, 1] > cine.height - 1):
            raise StageError("load", f"{c.kind} contour extends outside the cine image")
    result = segment(cine, lge, endo, epi, cfg, case.case_id)
    if out_dir is not None:
        try:
            write_case(result, out_dir)
        except OSError as exc:
            raise StageError("write", str(exc)) from exc
    return result


@dataclass
class BatchOutcome:
    succeeded: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 1 if self.failed else 0


def run_batch(cases: list[CasePair], cfg: PipelineConfig, out_dir) -> BatchOutcome:
    """Run every case; one failure never stops the remaining cases."""
    outcome = BatchOutcome()
    for case in cases:
        try:
            run_case(case, cfg, out_dir)
            outcome.succeeded.append(case.case_id)
        except StageError as exc:
            log.error("case %s failed: %s", case.case_id, exc)
            outcome.failed[case.case_id] = str(exc)
    return outcome


@dataclass
class StoredCase:
    """A phantom case read back from disk."""

    cine: Image2D
    lge: Image2D
    endo: Contour
    epi: Contour
    truth: ContourPair | None


def write_phantom_case(case: PhantomCase, out_dir, seed: int | None = None) -> Path:
    """Write a phantom as a one-line manifest case plus its ground truth.

    Layout: ``cine.pgm``, ``lge.pgm``, ``cine_endo.ctr``, ``cine_epi.ctr``,
    ``truth_*`` contours, ``scar_mask.pgm``, ``spec.txt`` and ``manifest.tsv``.
    """
    d = Path(out_dir)
    fileio.write_pgm(d / "cine.pgm", case.cine)
    fileio.write_pgm(d / "lge.pgm", case.lge)
    fileio.write_contour(d / "cine_endo.ctr", case.prior_endo)
    fileio.write_contour(d / "cine_epi.ctr", case.prior_epi)
    fileio.write_pair(d, case.true_endo, case.true_epi, stem="truth_")
    fileio.write_pgm(d / "scar_mask.pgm", Image2D(case.scar_mask * 255.0))
    spec_text = case.spec.to_text() + (f"# seed={seed}\n" if seed is not None else "")
    fileio.atomic_write(d / "spec.txt", spec_text)
    fileio.atomic_write(d / "manifest.tsv", f"cine.pgm\tlge.pgm\tcine_endo.ctr\tcine_epi.ctr\t{d.name or 'case'}\n")
    return d


def read_stored_case(case_dir) -> StoredCase:
    """Load a case directory written by :func:`write_phantom_case`.

    The ground truth is optional so that hand-assembled directories with
    just the four inputs also load.
    """
    d = Path(case_dir)
    try:
        cine = fileio.read_pgm(d / "cine.pgm")
        lge = fileio.read_pgm(d / "lge.pgm")
        endo = fileio.read_contour(d / "cine_endo.ctr")
        epi = fileio.read_contour(d / "cine_epi.ctr")
    except (OSError, ValueError) as exc:
        raise StageError("load", str(exc)) from exc
    truth = fileio.read_pair(d / "truth_pair.meta") if (d / "truth_pair.meta").exists() else None
    return StoredCase(cine, lge, endo, epi, truth)


def evaluate(auto: ContourPair, manual: ContourPair) -> EvalReport:
    return evaluate_pair(auto, manual)


def mean_pair_distance(a: ContourPair, b: ContourPair) -> float:
    """Mean of the endo and epi symmetric mean contour distances."""
    return 0.5 * (contour_distance(a.endo, b.endo)[0] + contour_distance(a.epi, b.epi)[0])


@dataclass
class MetricComparison:
    errors: dict[str, float]

    def ranking(self) -> list[str]:
        return sorted(self.errors, key=lambda k: (self.errors[k], k))

    def to_text(self) -> str:
        lines = [f"metric={m} error={self.errors[m]:.4f}" for m in METRICS if m in self.errors]
        lines.append("ranking=" + ",".join(self.ranking()))
        return "\n".join(lines) + "\n"


def compare_metrics(
    cine: Image2D,
    lge: Image2D,
    endo: Contour,
    epi: Contour,
    truth: ContourPair,
    cfg: PipelineConfig | None = None,
    metrics=METRICS,
    prealign: bool = False,
) -> MetricComparison:
    """FFD registration once per similarity metric, scored against ``truth``.

    Every run shares the bending regularizer; only the similarity term of
    the FFD cost changes. Without ``prealign`` the images go straight into
    the FFD stage, which suits phantoms already on a common grid and
    intensity scale. With it, normalization and the affine stage run first.
    """
    cfg = cfg or PipelineConfig()
    fixed, moving = lge, cine
    if prealign:
        norm = normalize(cine, lge, endo, epi, cfg)
        A = estimate_affine(norm.lge, norm.cine, cfg.affine)
        fixed, moving = norm.lge, warp_affine(norm.cine, A)
        endo, epi = transform_contour(norm.endo, A), transform_contour(norm.epi, A)
    elif cine.shape != lge.shape:
        raise ValueError("images differ in size; use prealign")
    errors = {}
    for m in metrics:
        grid = optimize_ffd_detailed(fixed, moving, replace(cfg.ffd, metric=m)).grid
        # scored on raw vertices: a poor metric may fold or cross the contours
        e = invert_ffd_points(grid, endo.vertices)
        p = invert_ffd_points(grid, epi.vertices)
        errors[m] = 0.5 * (contour_distance(e, truth.endo)[0] + contour_distance(p, truth.epi)[0])
    return MetricComparison(errors)
