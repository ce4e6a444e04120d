"""Wire models for the run service.

Requests reuse the manifest models from the harness (already strict);
the models here shape what goes back over the wire.  stderr is null
when undefined (fewer than two samples), matching the nan-to-null rule
of summary.json.
"""

from __future__ import annotations

from typing import Any

from pydantic import BaseModel, ConfigDict, Field


class EstimateOut(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mean: float
    stderr: float | None
    reps: int
    m2: float


class RunResponse(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int
    experiment: str
    config: dict[str, Any]
    estimates: dict[str, EstimateOut]
    derived: dict[str, Any]
    files: dict[str, str] | None = None


class GoldenCheckRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    golden_dir: str | None = None
    workers: int = Field(0, ge=0, le=16)


class GoldenCheckResponse(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    ok: bool
    mismatches: list[str]


class GoldenListResponse(BaseModel):
    model_config = ConfigDict(extra="forbid")

    goldens: list[str]


class HealthResponse(BaseModel):
    model_config = ConfigDict(extra="forbid")

    status: str
    version: str
    schema_version: int


class RegistryResponse(BaseModel):
    model_config = ConfigDict(extra="forbid")

    drifts: list[str]
    walks: list[str]
