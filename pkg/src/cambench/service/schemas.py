"""Pydantic request/response models for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class MethodsResponse(BaseModel):
    methods: list[str]


class LoadModelRequest(BaseModel):
    spec_path: str
    weights_path: str
    model_id: str = "default"


class LayerInfo(BaseModel):
    name: str
    kind: str
    output_shape: tuple[int, int, int]


class ModelInfo(BaseModel):
    model_id: str
    input_shape: tuple[int, int, int]
    class_count: int
    layers: list[LayerInfo]
    conv_layers: list[str]


class ModelListResponse(BaseModel):
    models: list[ModelInfo]


class ForwardRequest(BaseModel):
    tensor: list[list[list[float]]] | None = Field(
        default=None, description="one sample as nested (C, H, W) lists")
    image_path: str | None = Field(
        default=None, description="server-local CAMI image; windowed before inference")


class ForwardResponse(BaseModel):
    logits: list[float]


class ExplainRequest(ForwardRequest):
    method: str = "grad_cam"
    layer: str = "-1"
    class_index: int = 1
    tau: float | None = Field(default=None, description="if set, also return the binary mask")


class ExplainResponse(BaseModel):
    method: str
    layer: str
    class_index: int
    logits: list[float]
    heatmap: list[list[float]]
    mask: list[list[bool]] | None = None


class BenchmarkRequest(BaseModel):
    manifest_path: str
    methods: list[str] | None = None
    layers: list[str] | None = None
    class_index: int = 1
    tau: str = "calibrate"
    calibration_split: str = "train"
    modes: list[str] | None = None
    jobs: int = 0
    out_dir: str | None = Field(default=None, description="also write CSVs server-side")


class SummaryRowModel(BaseModel):
    method: str
    layer: str
    mode: str
    loose_hit_rate: float
    pixel_dice: float
    pixel_iou: float
    bbox_dice: float
    bbox_iou: float
    tau: float


class BenchmarkResponse(BaseModel):
    rows: list[SummaryRowModel]
    best_pixel_dice: SummaryRowModel | None = None
    n_eval_slices: int
    footer: str


class ScoredSliceModel(BaseModel):
    slice_id: str
    score: float
    label: int


class ClassifyEvalRequest(BaseModel):
    scores: list[ScoredSliceModel] | None = None
    scores_path: str | None = None
    thresholds: list[float] = Field(default_factory=lambda: [0.3, 0.5, 0.7])


class PrPoint(BaseModel):
    threshold: float
    precision: float
    recall: float
    f1: float


class ClassifyEvalResponse(BaseModel):
    points: list[PrPoint]


class OverlayRequest(BaseModel):
    manifest_path: str
    slice_id: str
    method: str = "grad_cam"
    layer: str = "-1"
    class_index: int = 1
    tau: str = "0.5"
    out_path: str | None = None


class OverlayResponse(BaseModel):
    ppm_base64: str
    tau: float
    pixel_dice: float
    pixel_iou: float
    loose_hit: int
    out_path: str | None = None
