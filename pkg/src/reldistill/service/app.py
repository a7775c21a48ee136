"""HTTP facade over the pipeline.

Endpoints run synchronously and write artifacts (run directories,
checkpoints, metrics) on the server's filesystem; responses carry the
paths. Domain errors come back as 400 with a ``kind`` the CLI maps to its
exit codes.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import ReldistillError
from ..pipeline import run_ablate, run_distill, run_eval, run_export, run_pretrain
from . import schemas

app = FastAPI(title="reldistill", version=__version__)


@app.exception_handler(ReldistillError)
async def _domain_error(request: Request, exc: ReldistillError) -> JSONResponse:
    return JSONResponse(
        status_code=400,
        content={"detail": {"kind": exc.kind, "message": str(exc)}},
    )


@app.get("/health", response_model=schemas.HealthResponse)
def health() -> schemas.HealthResponse:
    return schemas.HealthResponse(status="ok", version=__version__)


@app.post("/api/pretrain", response_model=schemas.PretrainResponse)
def pretrain(request: schemas.PretrainRequest) -> schemas.PretrainResponse:
    return schemas.PretrainResponse(**run_pretrain(request.config))


@app.post("/api/distill", response_model=schemas.DistillResponse)
def distill(request: schemas.DistillRequest) -> schemas.DistillResponse:
    return schemas.DistillResponse(**run_distill(request.config, request.teacher_checkpoint))


@app.post("/api/eval", response_model=schemas.EvalResponse)
def eval_(request: schemas.EvalRequest) -> schemas.EvalResponse:
    return schemas.EvalResponse(**run_eval(request.config, request.student_checkpoint))


@app.post("/api/export-embeddings", response_model=schemas.ExportResponse)
def export_embeddings(request: schemas.ExportRequest) -> schemas.ExportResponse:
    return schemas.ExportResponse(
        **run_export(request.config, request.student_checkpoint, request.out_path, request.n_samples)
    )


@app.post("/api/ablate", response_model=schemas.AblateResponse)
def ablate(request: schemas.AblateRequest) -> schemas.AblateResponse:
    return schemas.AblateResponse(
        **run_ablate(request.config, request.teacher_checkpoint, request.modes)
    )
