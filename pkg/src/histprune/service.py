"""Optional local HTTP front end (``pip install .[service]``).

Run with ``uvicorn histprune.service:app`` or ``histprune serve``; it binds
to localhost by default. Every route delegates to :mod:`histprune.api`.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import api
from .errors import HistPruneError, InfeasibleScenarioError, LibraryError
from .schemas import (
    ErrorResponse,
    LibraryExportRequest,
    LibraryImportRequest,
    LibraryListResponse,
    LibraryTransferResponse,
    ReportRequest,
    ReportResponse,
    RunRequest,
    RunResponse,
    SelectSourceRequest,
    SelectSourceResponse,
)


def error_status(exc: HistPruneError) -> int:
    if isinstance(exc, LibraryError):
        return 404
    if isinstance(exc, InfeasibleScenarioError):
        return 422
    return 400


def create_app() -> FastAPI:
    app = FastAPI(title="histprune", version="0.1.0")

    @app.exception_handler(HistPruneError)
    async def _domain_error(request: Request, exc: HistPruneError):
        body = ErrorResponse(error=type(exc).__name__, detail=str(exc))
        return JSONResponse(status_code=error_status(exc), content=body.model_dump())

    # plain ``def`` routes run in the threadpool, so long training runs do not block the loop
    @app.post("/runs", response_model=RunResponse)
    def post_run(req: RunRequest):
        return api.handle_run(req)

    @app.post("/report", response_model=ReportResponse)
    def post_report(req: ReportRequest):
        return api.handle_report(req)

    @app.post("/select-source", response_model=SelectSourceResponse)
    def post_select_source(req: SelectSourceRequest):
        return api.handle_select_source(req)

    @app.get("/library", response_model=LibraryListResponse)
    def get_library(library: str = "library"):
        return api.handle_library_list(library)

    @app.post("/library/import", response_model=LibraryTransferResponse)
    def post_library_import(req: LibraryImportRequest):
        return api.handle_library_import(req)

    @app.post("/library/export", response_model=LibraryTransferResponse)
    def post_library_export(req: LibraryExportRequest):
        return api.handle_library_export(req)

    return app


app = create_app()
