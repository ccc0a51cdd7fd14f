"""Request/response schemas for the HTTP service."""

from __future__ import annotations

from typing import List, Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class RunRequest(BaseModel):
    config_text: str = Field("", description="config file contents (key = value lines)")
    overrides: List[str] = Field(default_factory=list, description="key=value overrides")


class JobSubmitted(BaseModel):
    job_id: str


class JobStatus(BaseModel):
    job_id: str
    kind: str
    state: str  # queued | running | done | failed
    step: int = 0
    total_steps: int = 0
    out_dir: str = ""
    best_proxy_fid: Optional[float] = None
    best_step: Optional[int] = None
    halted: bool = False
    error: Optional[str] = None


class SweepRow(BaseModel):
    axis_value: float
    best_proxy_fid: float
    best_step: int


class SweepStatus(JobStatus):
    rows: List[SweepRow] = Field(default_factory=list)


class InterpolateRequest(BaseModel):
    checkpoint: str
    pairs: int = 4
    steps: int = 8
    seed: int = 0


class InterpolateResponse(BaseModel):
    files: List[str]


class ConfigTemplateResponse(BaseModel):
    config_text: str
