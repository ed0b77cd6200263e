"""Transport-independent handlers: validated request in, response model out.

The HTTP service and the in-process CLI both call these functions, so the
two paths behave identically.
"""

from __future__ import annotations

import csv
from pathlib import Path

from . import experiment
from .agent import AgentConfig
from .core import LearningCurve
from .env import check_feasible, make_model
from .experiment import scenario_from_document
from .schemas import (
    CandidateSummary,
    LibraryExportRequest,
    LibraryImportRequest,
    LibraryListResponse,
    LibraryTransferResponse,
    RecordMeta,
    ReportRequest,
    ReportResponse,
    ReportRowModel,
    RunRequest,
    RunResponse,
    SelectSourceRequest,
    SelectSourceResponse,
)
from .transfer import ModelLibrary, select_source, transfer_session_factory


def handle_run(req: RunRequest) -> RunResponse:
    return RunResponse(**experiment.run(req.config).summary())


def handle_report(req: ReportRequest) -> ReportResponse:
    rows, threshold = experiment.report(req.curve_csvs, req.threshold)
    if req.out:
        path = Path(req.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "trials", "convergence_trial", "final_smoothed", "best_ema", "speedup"])
            for r in rows:
                d = r.as_dict()
                w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in d.values()])
    return ReportResponse(threshold=threshold, rows=[ReportRowModel(**r.as_dict()) for r in rows])


def handle_select_source(req: SelectSourceRequest) -> SelectSourceResponse:
    scenario = scenario_from_document(req.scenario)
    check_feasible(scenario)
    library = ModelLibrary(req.library)
    ids = library.ids() if req.candidate_ids == "auto" else list(req.candidate_ids)
    records = [library.load(rid) for rid in ids]
    cfg = AgentConfig.from_dict({"noise_start": req.noise_start, **req.agent})
    factory = transfer_session_factory(scenario, cfg, req.seed, req.max_trials, make_model(scenario))
    sel = select_source(records, scenario, req.max_trials, factory, req.window, req.min_trials)
    if req.out:
        _write_selection_csv(Path(req.out), sel, req.window)
    return SelectSourceResponse(
        chosen=sel.chosen.record_id,
        reason=sel.reason.value,
        candidates=[CandidateSummary(**row) for row in sel.summary()],
    )


def _write_selection_csv(path: Path, sel, window: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "trial_index", "raw_accuracy", "smoothed_mean", "stopped_at"])
        for s in sel.sessions:
            curve = LearningCurve(list(s.rewards)).smoothed(window)
            for t, (raw, sm) in enumerate(zip(curve.rewards, curve.smoothed_mean)):
                w.writerow([s.record.record_id, t, repr(float(raw)), repr(float(sm)),
                            "" if s.stopped_at is None else s.stopped_at])


def handle_library_list(library: str) -> LibraryListResponse:
    lib = ModelLibrary(library)
    return LibraryListResponse(library=str(lib.root), records=[RecordMeta(**m) for m in lib.index()])


def handle_library_import(req: LibraryImportRequest) -> LibraryTransferResponse:
    lib = ModelLibrary(req.library)
    return LibraryTransferResponse(library=str(lib.root), archive=req.archive, record_ids=lib.import_archive(req.archive))


def handle_library_export(req: LibraryExportRequest) -> LibraryTransferResponse:
    lib = ModelLibrary(req.library)
    ids = lib.export(req.archive, req.record_ids)
    return LibraryTransferResponse(library=str(lib.root), archive=req.archive, record_ids=ids)
