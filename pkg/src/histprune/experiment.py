"""Reproducible experiment runs and learning-curve comparison reports."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .agent import CSV_COLUMNS, AgentConfig, DdpgAgent, ReplayBuffer, TrainingRun, greedy_policy, train
from .assistant import ASSISTANT_COLUMNS, AssistantConfig, HistoryIndex, assisted_train
from .core import ScenarioSpec, ema_smooth
from .env import check_feasible, make_model
from .errors import InvalidArgumentError, LibraryError
from .scenarios import REFERENCE_SCENARIOS
from .seeding import SeedStreams
from .transfer import (
    HistoricalRecord,
    ModelLibrary,
    SourceSelection,
    seed_buffer,
    select_source,
    transfer_session_factory,
    vanilla_transfer,
)

log = logging.getLogger(__name__)

Mode = Literal["scratch", "vanilla-transfer", "augmented-transfer", "assistant"]
MODES: tuple[str, ...] = ("scratch", "vanilla-transfer", "augmented-transfer", "assistant")


class TransferOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    noise_start: float = Field(0.1, ge=0.0, le=1.0)  # exploration std for a transferred agent
    selection_trials: int = Field(60, ge=1)
    window: int = Field(21, ge=1)
    min_trials: int = Field(30, ge=1)
    history_top_k: int | None = Field(10, ge=1)  # best traces per record indexed by the assistant
    augment_history: bool = True


class ExperimentConfig(BaseModel):
    """Everything that determines a run; with the seed, it determines every artifact."""

    model_config = ConfigDict(extra="forbid")

    scenario: dict[str, Any]
    mode: Mode = "scratch"
    source_ids: Union[list[str], Literal["auto"]] = Field(default_factory=list)
    trials: int = Field(300, ge=1)
    seed: int = Field(0, ge=0)
    agent: dict[str, Any] = Field(default_factory=dict)
    assistant: dict[str, Any] = Field(default_factory=dict)
    transfer: TransferOptions = Field(default_factory=TransferOptions)
    library: str = "library"
    output_dir: str = "runs/latest"
    model_tag: str = ""

    @field_validator("agent")
    @classmethod
    def _agent_keys(cls, v):
        AgentConfig.from_dict(v)
        return v

    @field_validator("assistant")
    @classmethod
    def _assistant_keys(cls, v):
        AssistantConfig.from_dict(v)
        return v

    @model_validator(mode="after")
    def _sources_for_transfer(self):
        if self.mode != "scratch" and not self.source_ids:
            raise ValueError(f"mode {self.mode!r} needs source_ids (a list of record ids or 'auto')")
        return self

    def build_scenario(self) -> ScenarioSpec:
        return scenario_from_document(self.scenario)

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text())
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.model_validate(data)


def scenario_from_document(doc: dict[str, Any]) -> ScenarioSpec:
    """A full scenario document, or ``{"reference": name, ...kwargs}`` for a built-in one."""
    if "reference" in doc:
        kwargs = {k: v for k, v in doc.items() if k != "reference"}
        try:
            factory = REFERENCE_SCENARIOS[doc["reference"]]
        except KeyError:
            raise InvalidArgumentError(
                f"unknown reference scenario {doc['reference']!r}; choose from {sorted(REFERENCE_SCENARIOS)}"
            ) from None
        return factory(**kwargs)
    return ScenarioSpec.from_dict(doc)


@dataclass
class RunResult:
    record_id: str
    source_id: str | None
    csv_path: Path
    policy_path: Path
    run: TrainingRun
    policy_actions: list[float]
    policy_accuracy: float
    seeded_transitions: int = 0

    def summary(self) -> dict:
        return {
            "record_id": self.record_id,
            "source_id": self.source_id,
            "csv_path": str(self.csv_path),
            "policy_path": str(self.policy_path),
            "trials": len(self.run.curve.rewards),
            "best_accuracy": self.run.best_accuracy,
            "final_smoothed": final_smoothed(self.run.curve.rewards),
            "policy_actions": self.policy_actions,
            "policy_accuracy": self.policy_accuracy,
            "seeded_transitions": self.seeded_transitions,
        }


def _format(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_curve_csv(path: Path, rows, columns: Sequence[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            d = row.as_dict()
            w.writerow([_format(d.get(c, "")) for c in columns])


def _resolve_sources(cfg: ExperimentConfig, library: ModelLibrary) -> list[HistoricalRecord]:
    ids = library.ids() if cfg.source_ids == "auto" else list(cfg.source_ids)
    if not ids:
        raise LibraryError(f"library {library.root} has no records to transfer from")
    return [library.load(rid) for rid in ids]


def choose_source(
    records: Sequence[HistoricalRecord],
    scenario: ScenarioSpec,
    agent_cfg: AgentConfig,
    seed: int,
    options: TransferOptions,
    model=None,
) -> SourceSelection:
    factory = transfer_session_factory(scenario, agent_cfg, seed, options.selection_trials, model)
    return select_source(records, scenario, options.selection_trials, factory, options.window, options.min_trials)


def run(cfg: ExperimentConfig) -> RunResult:
    """Execute one experiment and write its artifacts.

    Artifacts in ``output_dir``: ``curve.csv`` (one row per trial),
    ``policy.json`` (greedy per-layer actions of the final actor) and
    ``run.json`` (summary). A new record is added to the library.
    """
    scenario = cfg.build_scenario()
    check_feasible(scenario)
    streams = SeedStreams(cfg.seed)
    model = make_model(scenario)
    library = ModelLibrary(cfg.library)
    out = Path(cfg.output_dir)

    agent_opts = dict(cfg.agent)
    if cfg.mode != "scratch":
        agent_opts.setdefault("noise_start", cfg.transfer.noise_start)
    if cfg.mode in ("augmented-transfer", "assistant"):
        agent_opts["invariant_mode"] = True
    agent_cfg = AgentConfig.from_dict(agent_opts)
    agent = DdpgAgent(agent_cfg, streams.generator("init"), streams.generator("agent-noise"),
                      streams.generator("replay"))
    buffer = ReplayBuffer(agent_cfg.buffer_capacity)

    source: HistoricalRecord | None = None
    seeded = 0
    sources: list[HistoricalRecord] = []
    if cfg.mode != "scratch":
        sources = _resolve_sources(cfg, library)
        source = choose_source(sources, scenario, agent_cfg, cfg.seed, cfg.transfer, model).chosen
        vanilla_transfer(source, agent)
    if cfg.mode in ("augmented-transfer", "assistant"):
        seeded = seed_buffer(sources, scenario, buffer, streams.generator("shuffle"), model).inserted

    env_rng = streams.generator("env")
    columns = list(CSV_COLUMNS)
    if cfg.mode == "assistant":
        acfg = AssistantConfig.from_dict(cfg.assistant)
        index = HistoryIndex.from_records(sources, scenario, model, cfg.transfer.augment_history,
                                          cfg.transfer.history_top_k)
        result = assisted_train(agent, scenario, index, acfg, cfg.trials, streams.generator("assistant"),
                                buffer=buffer, model=model, env_rng=env_rng)
        columns += ASSISTANT_COLUMNS
    else:
        result = train(agent, scenario, cfg.trials, buffer=buffer, model=model, env_rng=env_rng)

    policy = greedy_policy(agent, scenario, model)
    csv_path = out / "curve.csv"
    write_curve_csv(csv_path, result.rows, columns)
    record = HistoricalRecord.from_agent(agent, scenario, result.traces, result.curve, model_tag=cfg.model_tag)
    record_id = library.insert(record)
    res = RunResult(record_id, source.record_id if source else None, csv_path, out / "policy.json", result,
                    [float(a) for a in policy.actions], float(policy.accuracy), seeded)
    res.policy_path.write_text(json.dumps({
        "scenario_id": scenario.scenario_id,
        "actions": res.policy_actions,
        "accuracy": res.policy_accuracy,
        "realized_preservation": policy.realized_preservation(scenario),
    }, indent=2) + "\n")
    (out / "run.json").write_text(json.dumps({"mode": cfg.mode, "seed": cfg.seed, **res.summary()}, indent=2) + "\n")
    return res


# -- reporting ------------------------------------------------------------


def final_smoothed(rewards: Sequence[float], window: int = 21) -> float:
    """Mean of the last ``window`` raw accuracies (fewer if the run is shorter)."""
    if len(rewards) == 0:
        return float("nan")
    return float(np.mean(np.asarray(rewards, dtype=float)[-window:]))


def convergence_trial(rewards: Sequence[float], threshold: float, weight: float = 0.5) -> int | None:
    """1-based count of trials until the EMA first reaches ``threshold``; None if it never does."""
    for i, e in enumerate(ema_smooth(rewards, weight)):
        if e >= threshold:
            return i + 1
    return None


def read_curve_csv(path: str | Path) -> list[float]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "raw_accuracy" not in reader.fieldnames:
            raise InvalidArgumentError(f"{path}: missing raw_accuracy column")
        return [float(r["raw_accuracy"]) for r in reader]


@dataclass
class ReportRow:
    run: str
    trials: int
    convergence_trial: int | None
    final_smoothed: float
    best_ema: float
    speedup: float | None

    def as_dict(self) -> dict:
        return {
            "run": self.run,
            "trials": self.trials,
            "convergence_trial": "no-converge" if self.convergence_trial is None else self.convergence_trial,
            "final_smoothed": self.final_smoothed,
            "best_ema": self.best_ema,
            "speedup": self.speedup,
        }


def default_threshold(curves: Sequence[Sequence[float]], fraction: float = 0.98) -> float:
    """``fraction`` of the best EMA accuracy reached by any of the runs."""
    best = max(max(ema_smooth(c)) for c in curves if len(c))
    return fraction * best


def report_curves(names: Sequence[str], curves: Sequence[Sequence[float]], threshold: float | None = None,
                  window: int = 21) -> tuple[list[ReportRow], float | None]:
    """Compare runs against the first one; speedup = baseline trials / run trials.

    A run that never reaches the threshold gets no speedup; if only the
    baseline fails to converge, the speedup is infinite.
    """
    if not curves:
        return [], threshold
    if threshold is None:
        threshold = default_threshold(curves)
    conv = [convergence_trial(c, threshold) for c in curves]
    rows = []
    for name, c, k in zip(names, curves, conv):
        if k is None:
            speedup = None
        elif conv[0] is None:
            speedup = math.inf
        else:
            speedup = conv[0] / k
        rows.append(ReportRow(name, len(c), k, final_smoothed(c, window), float(max(ema_smooth(c))) if len(c) else float("nan"),
                              speedup))
    return rows, threshold


def report(curve_csvs: Sequence[str | Path], threshold: float | None = None) -> tuple[list[ReportRow], float | None]:
    curves = [read_curve_csv(p) for p in curve_csvs]
    return report_curves([str(p) for p in curve_csvs], curves, threshold)
