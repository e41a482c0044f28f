"""FastAPI app: one POST endpoint per pipeline job."""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..graph import GraphError
from ..spectral import SpectralError
from .schemas import ErrorResult, Health, JobRequest, JobResult

# exit code -> HTTP status
_HTTP = {1: 500, 2: 422, 3: 409, 4: 404}


def _error(job: str, message: str, kind: str, code: int, detail=None) -> JSONResponse:
    body = ErrorResult(job=job, error=message, kind=kind, exit_code=code, detail=detail or {})
    return JSONResponse(status_code=_HTTP.get(code, 500), content=body.model_dump())


def _run(job: str, req: JobRequest):
    fn = pipeline.JOBS[job]
    try:
        return JobResult(**fn(req.config, req.output_dir))
    except pipeline.JobError as exc:
        return _error(job, str(exc), exc.kind, exc.exit_code, getattr(exc, "summary", None))
    except (GraphError, SpectralError, ValueError) as exc:
        return _error(job, str(exc), "config", 2)


def create_app() -> FastAPI:
    app = FastAPI(title="fedlap", version=__version__)

    @app.exception_handler(RequestValidationError)
    async def _invalid(request: Request, exc: RequestValidationError):
        job = request.url.path.strip("/") or "request"
        msg = "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors())
        return _error(job, msg, "config", 2)

    @app.get("/health", response_model=Health)
    def health():
        return Health(status="ok", version=__version__, jobs=list(pipeline.JOBS))

    def route(job: str):
        def handler(req: JobRequest):
            return _run(job, req)
        handler.__name__ = f"{job}_job"
        app.post(f"/{job}", response_model=JobResult, responses={422: {"model": ErrorResult}})(handler)

    for job in pipeline.JOBS:
        route(job)
    return app


app = create_app()
