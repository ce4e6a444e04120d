"""The run service: manifests in, pooled estimates out.

POST /run/{experiment} takes a manifest body (the experiment field may
be omitted; if present it must agree with the path), runs the chunk
plan, and returns the summary payload.  When the manifest names an
out_dir the run's files are written server-side and their paths
returned.  Validation problems are 422, an exhausted pipeline is 409
(reported, not hidden), unknown names are 404.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException, Query
from pydantic import ValidationError

from .. import __version__
from ..drift import registered_drifts
from ..harness import (
    GOLDEN_CONFIGS,
    SCHEMA_VERSION,
    Stage1Exhausted,
    golden_check,
    parse_config,
    run_experiment,
    summary_dict,
    write_outputs,
)
from ..kernel import registered_walks
from .schemas import (
    GoldenCheckRequest,
    GoldenCheckResponse,
    GoldenListResponse,
    HealthResponse,
    RegistryResponse,
    RunResponse,
)

EXPERIMENTS = ("sde1d", "lattice", "splitting", "picard", "moments", "pipeline")


def create_app() -> FastAPI:
    app = FastAPI(title="latticeblow", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(
            status="ok", version=__version__, schema_version=SCHEMA_VERSION
        )

    @app.get("/drifts", response_model=RegistryResponse)
    def drifts() -> RegistryResponse:
        return RegistryResponse(
            drifts=list(registered_drifts()), walks=list(registered_walks())
        )

    @app.post("/run/{experiment}", response_model=RunResponse)
    def run(
        experiment: str,
        body: dict,
        workers: int = Query(0, ge=0, le=16),
    ) -> RunResponse:
        if experiment not in EXPERIMENTS:
            raise HTTPException(
                404, f"unknown experiment {experiment!r}; have {list(EXPERIMENTS)}"
            )
        data = dict(body)
        if data.setdefault("experiment", experiment) != experiment:
            raise HTTPException(
                422, "experiment in the body disagrees with the path"
            )
        try:
            cfg = parse_config(data)
        except ValidationError as e:
            raise HTTPException(422, e.errors(include_url=False))
        except ValueError as e:
            raise HTTPException(422, str(e))
        try:
            out = run_experiment(cfg, workers=workers)
        except Stage1Exhausted as e:
            raise HTTPException(409, str(e))
        except ValueError as e:
            raise HTTPException(422, str(e))
        files = write_outputs(out, cfg.out_dir) if cfg.out_dir else None
        return RunResponse(**summary_dict(out), files=files)

    @app.get("/golden", response_model=GoldenListResponse)
    def golden_list() -> GoldenListResponse:
        return GoldenListResponse(goldens=sorted(GOLDEN_CONFIGS))

    @app.post("/golden/check", response_model=GoldenCheckResponse)
    def golden(body: GoldenCheckRequest) -> GoldenCheckResponse:
        try:
            chk = golden_check(body.name, body.golden_dir, workers=body.workers)
        except KeyError as e:
            raise HTTPException(404, e.args[0] if e.args else "unknown golden")
        return GoldenCheckResponse(
            name=chk.name, ok=chk.ok, mismatches=chk.mismatches
        )

    return app


app = create_app()
