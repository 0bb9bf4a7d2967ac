"""Request and response models for the HTTP service."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field, field_validator

Point = tuple[float, float]


class ImagePayload(BaseModel):
    """Row-major pixel rows plus physical spacing."""

    pixels: list[list[float]]
    spacing_x: float = Field(1.0, gt=0)
    spacing_y: float = Field(1.0, gt=0)

    @field_validator("pixels")
    @classmethod
    def rectangular(cls, rows):
        if len(rows) < 2 or len(rows[0]) < 2 or any(len(r) != len(rows[0]) for r in rows):
            raise ValueError("pixels must be a rectangular grid of at least 2x2")
        return rows


class ContourPayload(BaseModel):
    points: list[Point] = Field(min_length=3)


class PairPayload(BaseModel):
    endo: ContourPayload
    epi: ContourPayload


class SegmentRequest(BaseModel):
    cine: ImagePayload
    lge: ImagePayload
    endo: ContourPayload
    epi: ContourPayload
    config: dict[str, str] = Field(default_factory=dict, description="flat key=value overrides")


class SegmentResponse(BaseModel):
    stages: dict[str, PairPayload]
    affine: list[float]
    final: PairPayload


class EvaluateRequest(BaseModel):
    auto: PairPayload
    manual: PairPayload


class EvaluateResponse(BaseModel):
    dice_endo: float
    dice_epi: float
    dice_myo: float
    avg_dist_endo: float
    max_dist_endo: float
    avg_dist_epi: float
    max_dist_epi: float


class PhantomRequest(BaseModel):
    spec: dict[str, str] = Field(default_factory=dict, description="PhantomSpec key=value overrides")
    seed: int = 0


class PhantomResponse(BaseModel):
    cine: ImagePayload
    lge: ImagePayload
    prior: PairPayload
    truth: PairPayload
    scar_pixels: int


class SimilarityRequest(BaseModel):
    a: ImagePayload
    b: ImagePayload
    metric: Literal["pi", "ssd", "ncc", "nmi"] = "pi"


class SimilarityResponse(BaseModel):
    metric: str
    value: float
