"""Request/response models shared by the HTTP service and the CLI."""

from __future__ import annotations

from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field

from .experiment import ExperimentConfig


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", ser_json_inf_nan="strings")


class RunRequest(_Model):
    config: ExperimentConfig


class RunResponse(_Model):
    record_id: str
    source_id: Optional[str]
    csv_path: str
    policy_path: str
    trials: int
    best_accuracy: float
    final_smoothed: float
    policy_actions: list[float]
    policy_accuracy: float
    seeded_transitions: int


class ReportRequest(_Model):
    curve_csvs: list[str]
    threshold: Optional[float] = None
    out: Optional[str] = None  # optional CSV path for the table


class ReportRowModel(_Model):
    run: str
    trials: int
    convergence_trial: Union[int, Literal["no-converge"]]
    final_smoothed: float
    best_ema: float
    speedup: Optional[float]


class ReportResponse(_Model):
    threshold: Optional[float]
    rows: list[ReportRowModel]


class SelectSourceRequest(_Model):
    scenario: dict[str, Any]
    library: str = "library"
    candidate_ids: Union[list[str], Literal["auto"]] = "auto"
    max_trials: int = Field(60, ge=1)
    seed: int = Field(0, ge=0)
    agent: dict[str, Any] = Field(default_factory=dict)
    window: int = Field(21, ge=1)
    min_trials: int = Field(30, ge=1)
    noise_start: float = Field(0.1, ge=0.0, le=1.0)
    out: Optional[str] = None  # optional CSV of per-candidate smoothed curves


class CandidateSummary(_Model):
    record_id: str
    trials_run: int
    stopped_at: Optional[int]
    stopped_by: Optional[str]
    final_smoothed: Optional[float]
    chosen: bool


class SelectSourceResponse(_Model):
    chosen: str
    reason: str
    candidates: list[CandidateSummary]


class RecordMeta(_Model):
    record_id: str
    scenario_id: str
    preservation: float
    model_tag: str
    dataset_tag: str
    invariant_mode: bool
    created_at: str
    n_traces: int


class LibraryListResponse(_Model):
    library: str
    records: list[RecordMeta]


class LibraryImportRequest(_Model):
    library: str = "library"
    archive: str


class LibraryExportRequest(_Model):
    library: str = "library"
    archive: str
    record_ids: Optional[list[str]] = None


class LibraryTransferResponse(_Model):
    library: str
    archive: str
    record_ids: list[str]


class ErrorResponse(_Model):
    error: str
    detail: str
