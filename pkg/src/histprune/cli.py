"""Command-line client.

By default commands execute in-process through :mod:`histprune.api`;
``--server URL`` sends the same requests to a running ``histprune serve``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

from pydantic import BaseModel, ValidationError

from . import api
from .errors import HistPruneError, InfeasibleScenarioError, LibraryError
from .experiment import MODES, ExperimentConfig
from .schemas import (
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

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_LIBRARY, EXIT_INFEASIBLE = 0, 1, 2, 3, 4


class RemoteError(Exception):
    def __init__(self, status: int, body: dict):
        super().__init__(body.get("detail", str(body)))
        self.status = status
        self.body = body


class Client:
    """Dispatches requests either in-process or over HTTP."""

    def __init__(self, server: str | None = None):
        self.server = server.rstrip("/") if server else None

    def _http(self, method: str, path: str, model: type[BaseModel], body: BaseModel | None = None, params=None):
        import httpx

        payload = None if body is None else json.loads(body.model_dump_json())
        resp = httpx.request(method, self.server + path, json=payload, params=params, timeout=None)
        if resp.status_code >= 400:
            try:
                raise RemoteError(resp.status_code, resp.json())
            except ValueError:
                raise RemoteError(resp.status_code, {"detail": resp.text}) from None
        return model.model_validate(resp.json())

    def run(self, req: RunRequest) -> RunResponse:
        return self._http("POST", "/runs", RunResponse, req) if self.server else api.handle_run(req)

    def report(self, req: ReportRequest) -> ReportResponse:
        return self._http("POST", "/report", ReportResponse, req) if self.server else api.handle_report(req)

    def select_source(self, req: SelectSourceRequest) -> SelectSourceResponse:
        if self.server:
            return self._http("POST", "/select-source", SelectSourceResponse, req)
        return api.handle_select_source(req)

    def library_list(self, library: str) -> LibraryListResponse:
        if self.server:
            return self._http("GET", "/library", LibraryListResponse, params={"library": library})
        return api.handle_library_list(library)

    def library_import(self, req: LibraryImportRequest) -> LibraryTransferResponse:
        if self.server:
            return self._http("POST", "/library/import", LibraryTransferResponse, req)
        return api.handle_library_import(req)

    def library_export(self, req: LibraryExportRequest) -> LibraryTransferResponse:
        if self.server:
            return self._http("POST", "/library/export", LibraryTransferResponse, req)
        return api.handle_library_export(req)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="histprune", description="History-accelerated RL auto-pruning experiments.")
    p.add_argument("--server", help="send requests to a running service instead of running in-process")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", required=True, help="experiment config (JSON)")
    r.add_argument("--seed", type=int)
    r.add_argument("--trials", type=int)
    r.add_argument("--mode", choices=MODES)
    r.add_argument("--out", help="output directory (overrides output_dir)")
    r.add_argument("--library", help="library directory (overrides library)")

    rep = sub.add_parser("report", help="compare learning-curve CSVs; the first is the baseline")
    rep.add_argument("csvs", nargs="*")
    rep.add_argument("--threshold", type=float, help="EMA accuracy threshold (default: 98%% of the best EMA)")
    rep.add_argument("--out", help="write the table as CSV")

    s = sub.add_parser("select-source", help="race candidate records and pick a transfer source")
    s.add_argument("--config", required=True, help="experiment config or scenario (JSON)")
    s.add_argument("--seed", type=int)
    s.add_argument("--trials", type=int, help="maximum trials per candidate")
    s.add_argument("--out", help="write per-candidate smoothed curves as CSV")
    s.add_argument("--library")
    s.add_argument("--candidates", nargs="+", help="record ids (default: config source_ids, else every record)")

    lib = sub.add_parser("library", help="inspect or move historical records")
    lsub = lib.add_subparsers(dest="library_command", required=True)
    ll = lsub.add_parser("list")
    ll.add_argument("--library", default="library")
    li = lsub.add_parser("import")
    li.add_argument("archive")
    li.add_argument("--library", default="library")
    le = lsub.add_parser("export")
    le.add_argument("archive")
    le.add_argument("--library", default="library")
    le.add_argument("--ids", nargs="+", help="records to export (default: all)")

    sv = sub.add_parser("serve", help="start the HTTP service (needs the 'service' extra)")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8000)
    return p


def _emit(model: BaseModel) -> None:
    print(model.model_dump_json(indent=2))


def _load_json(path: str) -> dict:
    return json.loads(Path(path).read_text())


def _cmd_run(args, client: Client) -> None:
    cfg = ExperimentConfig.load(args.config, seed=args.seed, trials=args.trials, mode=args.mode,
                                output_dir=args.out, library=args.library)
    _emit(client.run(RunRequest(config=cfg)))


def _cmd_report(args, client: Client) -> None:
    resp = client.report(ReportRequest(curve_csvs=args.csvs, threshold=args.threshold, out=args.out))
    if resp.threshold is not None:
        print(f"threshold {resp.threshold:.6f}")
    print(f"{'run':40s} {'trials':>6s} {'converged':>12s} {'final':>8s} {'speedup':>8s}")
    for row in resp.rows:
        if row.speedup is None:
            speed = "-"
        elif math.isinf(row.speedup):
            speed = "inf"
        else:
            speed = f"{row.speedup:.2f}x"
        print(f"{row.run[-40:]:40s} {row.trials:6d} {str(row.convergence_trial):>12s} "
              f"{row.final_smoothed:8.4f} {speed:>8s}")


def _cmd_select(args, client: Client) -> None:
    doc = _load_json(args.config)
    scenario = doc.get("scenario", doc)
    req = {"scenario": scenario, "library": args.library or doc.get("library", "library")}
    if args.candidates:
        req["candidate_ids"] = args.candidates
    elif doc.get("source_ids"):
        req["candidate_ids"] = doc["source_ids"]
    if args.trials is not None:
        req["max_trials"] = args.trials
    req["seed"] = args.seed if args.seed is not None else doc.get("seed", 0)
    if "agent" in doc:
        req["agent"] = doc["agent"]
    if args.out:
        req["out"] = args.out
    _emit(client.select_source(SelectSourceRequest(**req)))


def _cmd_library(args, client: Client) -> None:
    if args.library_command == "list":
        resp = client.library_list(args.library)
        for r in resp.records:
            print(f"{r.record_id}\tp={r.preservation:g}\t{r.scenario_id}\t{r.dataset_tag}\t"
                  f"invariant={int(r.invariant_mode)}\t{r.created_at}")
        if not resp.records:
            print(f"(no records in {resp.library})")
    elif args.library_command == "import":
        _emit(client.library_import(LibraryImportRequest(library=args.library, archive=args.archive)))
    else:
        _emit(client.library_export(LibraryExportRequest(library=args.library, archive=args.archive,
                                                         record_ids=args.ids)))


def _cmd_serve(args) -> None:
    import uvicorn

    uvicorn.run("histprune.service:app", host=args.host, port=args.port)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    client = Client(args.server)
    try:
        if args.command == "run":
            _cmd_run(args, client)
        elif args.command == "report":
            _cmd_report(args, client)
        elif args.command == "select-source":
            _cmd_select(args, client)
        elif args.command == "library":
            _cmd_library(args, client)
        elif args.command == "serve":
            _cmd_serve(args)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LibraryError as exc:
        print(f"library error: {exc}", file=sys.stderr)
        return EXIT_LIBRARY
    except InfeasibleScenarioError as exc:
        print(f"infeasible scenario (layer {exc.layer}): {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except RemoteError as exc:
        print(f"server error {exc.status}: {exc}", file=sys.stderr)
        return {404: EXIT_LIBRARY, 422: EXIT_INFEASIBLE}.get(exc.status, EXIT_ERROR)
    except HistPruneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
