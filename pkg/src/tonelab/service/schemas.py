"""Request/response models for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class ApiError(BaseModel):
    code: str
    message: str
    detail: str | None = None


class HealthResponse(BaseModel):
    status: str
    model_loaded: bool


class ProjectInfo(BaseModel):
    id: str
    version: int
    width: int
    height: int
    latent_shape: list[int]
    created_at: str
    edit_count: int
    segmented: bool
    k: int | None = None


class SegmentRequest(BaseModel):
    k_min: int = 1
    k_max: int = 10
    seed: int = 0


class RegionStat(BaseModel):
    label: int
    area_px: int
    mean_intensity: float
    mean_type: list[float]


class SegmentResponse(BaseModel):
    k: int
    silhouette: float | None
    regions: list[RegionStat]
    version: int


class RegionRef(BaseModel):
    label: int | None = None
    mask_id: str | None = None


class EditRequest(BaseModel):
    version: int
    region: RegionRef
    type_action: str = "keep"
    type_vector: list[float] | None = None
    donor_label: int | None = None
    intensity_action: str = "keep"
    intensity_value: float = 0.0


class EditResponse(BaseModel):
    version: int
    edit_count: int
    preview_url: str
    region_mean_intensity: float
    region_type_vector: list[float]


class UndoResponse(BaseModel):
    version: int
    edit_count: int
    preview_url: str


class MaskResponse(BaseModel):
    mask_id: str


class PaletteEntryInfo(BaseModel):
    index: int
    label: str
    vector: list[float]
    thumbnail_url: str


class ProjectList(BaseModel):
    projects: list[ProjectInfo] = Field(default_factory=list)
