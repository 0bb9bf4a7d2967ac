"""HTTP front end over the in-process pipeline.

Run with ``lgeseg serve`` or ``uvicorn lgeseg.service:app``. Every endpoint
is synchronous CPU work, so FastAPI runs the handlers in its thread pool.
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException

from . import __version__
from .affinereg import ncc
from .config import ConfigError, parse_config
from .contour import Contour, ContourError, ContourPair
from .ffdreg import pattern_intensity
from .imagecore import Image2D, ImageError
from .metrics import MetricError, nmi, ssd
from .phantom import PhantomError, PhantomSpec, make_phantom
from .pipeline import StageError, evaluate, segment
from .schemas import (
    ContourPayload,
    EvaluateRequest,
    EvaluateResponse,
    ImagePayload,
    PairPayload,
    PhantomRequest,
    PhantomResponse,
    SegmentRequest,
    SegmentResponse,
    SimilarityRequest,
    SimilarityResponse,
)

app = FastAPI(title="lgeseg", version=__version__)


def to_image(p: ImagePayload) -> Image2D:
    return Image2D(np.asarray(p.pixels, dtype=np.float64), p.spacing_x, p.spacing_y)


def from_image(img: Image2D) -> ImagePayload:
    return ImagePayload(pixels=img.data.tolist(), spacing_x=img.spacing_x, spacing_y=img.spacing_y)


def from_pair(pair) -> PairPayload:
    return PairPayload(
        endo=ContourPayload(points=[tuple(v) for v in pair.endo.vertices.tolist()]),
        epi=ContourPayload(points=[tuple(v) for v in pair.epi.vertices.tolist()]),
    )


def to_pair(p: PairPayload) -> ContourPair:
    return ContourPair.from_contours(Contour(np.asarray(p.endo.points), "endo"), Contour(np.asarray(p.epi.points), "epi"))


def _kv(d: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in d.items())


def _bad(exc: Exception) -> HTTPException:
    return HTTPException(status_code=422, detail=str(exc))


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/segment", response_model=SegmentResponse)
def segment_endpoint(req: SegmentRequest):
    try:
        cfg = parse_config(_kv(req.config))
        result = segment(
            to_image(req.cine),
            to_image(req.lge),
            Contour(np.asarray(req.endo.points), "endo"),
            Contour(np.asarray(req.epi.points), "epi"),
            cfg,
        )
    except (ConfigError, ContourError, ImageError, StageError) as exc:
        raise _bad(exc) from exc
    return SegmentResponse(
        stages={k: from_pair(v) for k, v in result.stages.items()},
        affine=result.affine.params().tolist(),
        final=from_pair(result.final),
    )


@app.post("/evaluate", response_model=EvaluateResponse)
def evaluate_endpoint(req: EvaluateRequest):
    try:
        report = evaluate(to_pair(req.auto), to_pair(req.manual))
    except (ContourError, MetricError) as exc:
        raise _bad(exc) from exc
    return EvaluateResponse(**vars(report))


@app.post("/phantom", response_model=PhantomResponse)
def phantom_endpoint(req: PhantomRequest):
    try:
        ph = make_phantom(PhantomSpec.from_text(_kv(req.spec)), req.seed)
    except PhantomError as exc:
        raise _bad(exc) from exc
    return PhantomResponse(
        cine=from_image(ph.cine),
        lge=from_image(ph.lge),
        prior=from_pair(ContourPair.from_contours(ph.prior_endo, ph.prior_epi)),
        truth=from_pair(ContourPair.from_contours(ph.true_endo, ph.true_epi)),
        scar_pixels=int(ph.scar_mask.sum()),
    )


_SIMILARITY = {"pi": pattern_intensity, "ssd": ssd, "ncc": ncc, "nmi": nmi}


@app.post("/similarity", response_model=SimilarityResponse)
def similarity_endpoint(req: SimilarityRequest):
    try:
        value = _SIMILARITY[req.metric](to_image(req.a), to_image(req.b))
    except (ImageError, MetricError, ValueError) as exc:
        raise _bad(exc) from exc
    return SimilarityResponse(metric=req.metric, value=float(value))
