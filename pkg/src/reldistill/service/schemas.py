"""Request/response models for the training service.

``config`` fields carry flat dotted keys exactly as they appear in config
files; values may be raw strings (as the CLI sends them) or already-typed
JSON scalars. The server resolves them against the schema defaults and
rejects unknown keys.
"""

from __future__ import annotations

from pydantic import BaseModel, Field

ConfigMap = dict[str, bool | int | float | str]


class PretrainRequest(BaseModel):
    config: ConfigMap = Field(default_factory=dict)


class PretrainResponse(BaseModel):
    run_dir: str
    checkpoint: str
    metrics: str
    epochs: int
    final_l_c: float
    final_l_r: float
    final_train_accuracy: float


class DistillRequest(BaseModel):
    config: ConfigMap = Field(default_factory=dict)
    teacher_checkpoint: str


class DistillResponse(BaseModel):
    run_dir: str
    checkpoint: str
    metrics: str
    epochs: int
    ablation: str
    best_val_accuracy: float | None = None
    best_epoch: int | None = None


class EvalRequest(BaseModel):
    config: ConfigMap = Field(default_factory=dict)
    student_checkpoint: str


class EvalResponse(BaseModel):
    run_dir: str
    result_path: str
    n_episodes: int
    mean_accuracy: float
    ci95_halfwidth: float
    config_fingerprint: str


class ExportRequest(BaseModel):
    config: ConfigMap = Field(default_factory=dict)
    student_checkpoint: str
    out_path: str | None = None
    n_samples: int | None = None


class ExportResponse(BaseModel):
    run_dir: str
    path: str
    count: int
    dim: int


class AblateRequest(BaseModel):
    config: ConfigMap = Field(default_factory=dict)
    teacher_checkpoint: str
    modes: list[str] = Field(default_factory=lambda: ["full", "whole_matrix", "no_regularizer"])


class AblationRowModel(BaseModel):
    mode: str
    n_episodes: int
    mean_accuracy: float
    ci95_halfwidth: float
    config_fingerprint: str


class AblateResponse(BaseModel):
    run_dir: str
    table_path: str
    rows: list[AblationRowModel]


class HealthResponse(BaseModel):
    status: str
    version: str


class ErrorInfo(BaseModel):
    kind: str
    message: str
