"""Historical-model library, weight transfer, source selection and augmentation.

A :class:`ModelLibrary` keeps one directory per :class:`HistoricalRecord`
(``meta.json`` plus ``actor.bin``/``critic.bin`` in the netlib binary
format). Records are inserted by renaming a fully written temporary
directory, so concurrent writers never expose half-written records.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import tarfile
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .agent import AgentConfig, DdpgAgent, ReplayBuffer, Trainer
from .core import A_MIN, EpisodeTrace, LearningCurve, ScenarioSpec, moving_stats
from .env import make_model, replay_trace
from .errors import (
    AugmentationInfeasibleError,
    InsufficientDataError,
    InvalidArgumentError,
    LibraryError,
    TransferError,
)
from .netlib import MlpParams, params_from_bytes, params_to_bytes

log = logging.getLogger(__name__)

RECORD_FORMAT = 1
META_FILE = "meta.json"


@dataclass
class HistoricalRecord:
    record_id: str
    scenario: ScenarioSpec
    actor: MlpParams
    critic: MlpParams
    invariant_mode: bool = False
    traces: list[EpisodeTrace] = field(default_factory=list)
    final_curve: LearningCurve = field(default_factory=lambda: LearningCurve([]))
    created_at: str = ""
    model_tag: str = ""

    def __post_init__(self):
        for tr in self.traces:
            if tr.scenario_id != self.scenario.scenario_id:
                raise LibraryError(
                    f"trace for {tr.scenario_id!r} stored with scenario {self.scenario.scenario_id!r}"
                )

    @property
    def preservation(self) -> float:
        return self.scenario.target_preservation

    @classmethod
    def from_agent(
        cls,
        agent: DdpgAgent,
        scenario: ScenarioSpec,
        traces: Sequence[EpisodeTrace] = (),
        curve: LearningCurve | None = None,
        record_id: str = "",
        model_tag: str = "",
        created_at: str | None = None,
    ) -> "HistoricalRecord":
        if created_at is None:
            created_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
        return cls(
            record_id=record_id,
            scenario=scenario,
            actor=agent.actor.copy(),
            critic=agent.critic.copy(),
            invariant_mode=agent.invariant_mode,
            traces=list(traces),
            final_curve=curve if curve is not None else LearningCurve([]),
            created_at=created_at,
            model_tag=model_tag,
        )

    def metadata(self) -> dict:
        return {
            "record_id": self.record_id,
            "scenario_id": self.scenario.scenario_id,
            "preservation": self.preservation,
            "model_tag": self.model_tag,
            "dataset_tag": self.scenario.dataset_tag,
            "invariant_mode": self.invariant_mode,
            "created_at": self.created_at,
            "n_traces": len(self.traces),
        }

    def meta_document(self) -> dict:
        return {
            "format": RECORD_FORMAT,
            **self.metadata(),
            "scenario": self.scenario.to_dict(),
            "traces": [t.to_dict() for t in self.traces],
            "final_curve": self.final_curve.to_dict(),
        }


def _default_record_id(record: HistoricalRecord) -> str:
    digest = hashlib.sha1(params_to_bytes(record.actor) + params_to_bytes(record.critic)).hexdigest()
    return f"{record.scenario.scenario_id}-{digest[:10]}"


def _valid_id(record_id: str) -> bool:
    return bool(record_id) and not record_id.startswith(".") and "/" not in record_id and "\\" not in record_id


class ModelLibrary:
    """Directory-backed store of historical records."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def ids(self) -> list[str]:
        return sorted(
            p.name for p in self.root.iterdir() if p.is_dir() and not p.name.startswith(".") and (p / META_FILE).exists()
        )

    def __len__(self) -> int:
        return len(self.ids())

    def __contains__(self, record_id: str) -> bool:
        return _valid_id(record_id) and (self.root / record_id / META_FILE).exists()

    def index(self) -> list[dict]:
        """Metadata of every record, sorted by id."""
        out = []
        for rid in self.ids():
            meta = json.loads((self.root / rid / META_FILE).read_text())
            out.append({k: meta[k] for k in (
                "record_id", "scenario_id", "preservation", "model_tag", "dataset_tag",
                "invariant_mode", "created_at", "n_traces",
            )})
        return out

    def insert(self, record: HistoricalRecord) -> str:
        """Write ``record`` atomically; returns the id it was stored under.

        An empty ``record_id`` is replaced by ``<scenario_id>-<weights digest>``;
        an id already in use gets a numeric suffix.
        """
        base = record.record_id or _default_record_id(record)
        if not _valid_id(base):
            raise LibraryError(f"invalid record id {base!r}")
        tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=self.root))
        try:
            self._write_files(tmp, record)
            for n in range(10_000):
                rid = base if n == 0 else f"{base}-{n}"
                record.record_id = rid
                self._write_meta(tmp, record)
                try:
                    os.rename(tmp, self.root / rid)
                    return rid
                except OSError:
                    if not (self.root / rid).exists():
                        raise
            raise LibraryError(f"could not allocate an id for {base!r}")
        finally:
            if tmp.exists():
                shutil.rmtree(tmp, ignore_errors=True)

    @staticmethod
    def _write_files(directory: Path, record: HistoricalRecord) -> None:
        (directory / "actor.bin").write_bytes(params_to_bytes(record.actor))
        (directory / "critic.bin").write_bytes(params_to_bytes(record.critic))

    @staticmethod
    def _write_meta(directory: Path, record: HistoricalRecord) -> None:
        (directory / META_FILE).write_text(json.dumps(record.meta_document()))

    def load(self, record_id: str) -> HistoricalRecord:
        if record_id not in self:
            raise LibraryError(f"no record {record_id!r} in {self.root}")
        return self._read_dir(self.root / record_id)

    @staticmethod
    def _read_dir(directory: Path) -> HistoricalRecord:
        try:
            meta = json.loads((directory / META_FILE).read_text())
            actor = params_from_bytes((directory / "actor.bin").read_bytes())
            critic = params_from_bytes((directory / "critic.bin").read_bytes())
        except (OSError, ValueError, KeyError) as exc:
            raise LibraryError(f"corrupt record at {directory}: {exc}") from exc
        if meta.get("format") != RECORD_FORMAT:
            raise LibraryError(f"unsupported record format {meta.get('format')!r}")
        return HistoricalRecord(
            record_id=meta["record_id"],
            scenario=ScenarioSpec.from_dict(meta["scenario"]),
            actor=actor,
            critic=critic,
            invariant_mode=bool(meta["invariant_mode"]),
            traces=[EpisodeTrace.from_dict(t) for t in meta["traces"]],
            final_curve=LearningCurve.from_dict(meta["final_curve"]),
            created_at=meta["created_at"],
            model_tag=meta.get("model_tag", ""),
        )

    def export(self, path: str | os.PathLike, record_ids: Sequence[str] | None = None) -> list[str]:
        """Pack records (all by default) into a gzip tarball."""
        ids = self.ids() if record_ids is None else list(record_ids)
        for rid in ids:
            if rid not in self:
                raise LibraryError(f"no record {rid!r} in {self.root}")
        with tarfile.open(path, "w:gz") as tar:
            for rid in ids:
                tar.add(self.root / rid, arcname=rid)
        return ids

    def import_archive(self, path: str | os.PathLike) -> list[str]:
        """Insert every record of an exported tarball; returns the stored ids."""
        try:
            tar = tarfile.open(path, "r:*")
        except (OSError, tarfile.TarError) as exc:
            raise LibraryError(f"cannot open archive {path}: {exc}") from exc
        with tar, tempfile.TemporaryDirectory() as tmp:
            for member in tar.getmembers():
                parts = Path(member.name).parts
                if member.name.startswith("/") or ".." in parts or not (member.isfile() or member.isdir()):
                    raise LibraryError(f"unsafe archive member {member.name!r}")
            tar.extractall(tmp)
            stored = []
            for d in sorted(Path(tmp).iterdir()):
                if d.is_dir() and (d / META_FILE).exists():
                    stored.append(self.insert(self._read_dir(d)))
        return stored


# -- transfer ------------------------------------------------------------


def vanilla_transfer(record: HistoricalRecord, agent: DdpgAgent) -> DdpgAgent:
    """Initialize ``agent``'s networks (and targets) from ``record``; optimizers restart."""
    for name, src, dst in (("actor", record.actor, agent.actor), ("critic", record.critic, agent.critic)):
        if src.layer_sizes != dst.layer_sizes:
            for i, (a, b) in enumerate(zip(src.layer_sizes, dst.layer_sizes)):
                if a != b:
                    raise TransferError(f"{name} layer {i} width {a} does not match target width {b}")
            raise TransferError(f"{name} depth {len(src.layer_sizes)} does not match {len(dst.layer_sizes)}")
        if src.output_activation != dst.output_activation:
            raise TransferError(f"{name} output activation {src.output_activation} != {dst.output_activation}")
    if record.invariant_mode != agent.invariant_mode:
        log.warning("transferring a record with invariant_mode=%s into an agent with invariant_mode=%s",
                    record.invariant_mode, agent.invariant_mode)
    agent.actor = record.actor.copy()
    agent.critic = record.critic.copy()
    agent.target_actor = record.actor.copy()
    agent.target_critic = record.critic.copy()
    agent.reset_optimizers()
    return agent


# -- data augmentation --------------------------------------------------


def augment_ratio(a_source, p_source: float, p_target: float, a_min: float = A_MIN, clamp: bool = True):
    """Map actions between preservation ratios: 1 - (1 - a)(1 - p_t)/(1 - p_s).

    Fully kept layers (a = 1) stay fully kept for every ratio pair.
    """
    if not (0.0 < p_source < 1.0) or not (0.0 < p_target <= 1.0):
        raise InvalidArgumentError(f"ratios must lie in (0, 1), got p_source={p_source}, p_target={p_target}")
    a = np.asarray(a_source, dtype=float)
    out = 1.0 - (1.0 - a) / (1.0 - p_source) * (1.0 - p_target)
    if clamp:
        out = np.clip(out, a_min, 1.0)
    return float(out) if out.ndim == 0 else out


def depth_alignment(n_source: int, n_target: int) -> np.ndarray:
    """For each target layer, the source layer nearest in normalized depth (ties to the shallower one)."""
    if n_source < 1 or n_target < 1:
        raise InvalidArgumentError("both networks need at least one layer")
    src = np.arange(n_source) / max(n_source - 1, 1)
    tgt = np.arange(n_target) / max(n_target - 1, 1)
    return np.argmin(np.abs(tgt[:, None] - src[None, :]) + 1e-12 * np.arange(n_source)[None, :], axis=1)


def _scale_to_budget(actions: np.ndarray, flops: np.ndarray, free: np.ndarray, budget: float, a_min: float) -> np.ndarray:
    """Multiply the free actions by one common factor so that sum(a * flops) == budget.

    Actions that would fall below ``a_min`` are pinned there and the factor is
    recomputed over the rest.
    """
    a = actions.copy()
    free = free.copy()
    for _ in range(len(a) + 1):
        fixed_cost = float(np.dot(a[~free], flops[~free]))
        free_cost = float(np.dot(a[free], flops[free]))
        if free_cost <= 0.0:
            break
        k = (budget - fixed_cost) / free_cost
        scaled = a * k
        low = free & (scaled < a_min)
        if not low.any():
            a[free] = scaled[free]
            return a
        a[low] = a_min
        free &= ~low
    raise AugmentationInfeasibleError("budget cannot be met with the remaining adjustable layers")


def augment_cross_model(
    trace: EpisodeTrace,
    source: ScenarioSpec,
    target: ScenarioSpec,
    model=None,
    a_min: float = A_MIN,
) -> EpisodeTrace:
    """Re-express a source trace as a trace of the target scenario.

    Layers are aligned by normalized depth, target-critical layers are set to
    1, the other layers are scaled down by a common factor so the overall
    (flops-weighted) preservation of the aligned actions is unchanged, the
    ratio map is applied if the scenarios' ratios differ, and the result is
    replayed in the target environment for fresh states and reward.
    """
    if len(trace.actions) != source.n_layers:
        raise InvalidArgumentError("trace length does not match the source scenario")
    mapping = depth_alignment(source.n_layers, target.n_layers)
    a = np.asarray(trace.actions, dtype=float)[mapping]
    flops = target.flops
    crit = target.critical_mask
    budget = float(np.dot(a, flops))
    a[crit] = 1.0
    if np.dot(a, flops) > budget * (1.0 + 1e-12):
        free = ~crit
        floor_cost = float(flops[crit].sum() + a_min * flops[free].sum())
        if not free.any() or floor_cost > budget * (1.0 + 1e-12):
            raise AugmentationInfeasibleError(
                f"critical layers of {target.scenario_id} alone exceed the trace's preservation budget"
            )
        a = _scale_to_budget(a, flops, free, budget, a_min)
    p_s, p_t = source.target_preservation, target.target_preservation
    if p_s != p_t:
        if p_s >= 1.0:
            raise AugmentationInfeasibleError("cannot rescale actions from a scenario without pruning (p = 1)")
        a[~crit] = augment_ratio(a[~crit], p_s, p_t, a_min)
    model = model if model is not None else make_model(target)
    return replay_trace(target, a, model, trial_index=trace.trial_index)


@dataclass
class SeedReport:
    inserted: int = 0
    skipped: int = 0


def augmented_traces(
    records: Sequence[HistoricalRecord], target: ScenarioSpec, model=None, a_min: float = A_MIN
) -> tuple[list[tuple[str, EpisodeTrace]], int]:
    """All record traces re-expressed for ``target``; returns ((record_id, trace) pairs, skipped count)."""
    model = model if model is not None else make_model(target)
    out, skipped = [], 0
    for rec in records:
        for tr in rec.traces:
            try:
                out.append((rec.record_id, augment_cross_model(tr, rec.scenario, target, model, a_min)))
            except AugmentationInfeasibleError:
                skipped += 1
    return out, skipped


def seed_buffer(
    records: Sequence[HistoricalRecord],
    target: ScenarioSpec,
    buffer: ReplayBuffer,
    rng: np.random.Generator,
    model=None,
    a_min: float = A_MIN,
) -> SeedReport:
    """Insert augmented historical transitions into ``buffer`` in shuffled episode order."""
    pairs, skipped = augmented_traces(records, target, model, a_min)
    order = rng.permutation(len(pairs))
    inserted = 0
    for i in order:
        transitions = pairs[i][1].transitions()
        for t in transitions:
            buffer.push(t)
        inserted += len(transitions)
    if skipped:
        log.info("seed_buffer skipped %d infeasible traces", skipped)
    return SeedReport(inserted, skipped)


# -- source selection ----------------------------------------------------


class VerdictReason(str, Enum):
    SIGNIFICANT = "significant"
    MAX_TRIAL_TIEBREAK = "max-trial-tiebreak"
    UNDECIDED = "undecided"


@dataclass(frozen=True)
class SuperiorityVerdict:
    winner: str | None
    decisive_trial: int | None
    reason: VerdictReason

    def __post_init__(self):
        if self.reason is VerdictReason.SIGNIFICANT and self.decisive_trial is None:
            raise InvalidArgumentError("a significant verdict needs a decisive trial")


def superior(
    curve_a: Sequence[float],
    curve_b: Sequence[float],
    window: int = 21,
    min_trials: int = 30,
    ids: tuple[str, str] = ("A", "B"),
) -> SuperiorityVerdict:
    """Variance-sum superiority test on two learning curves.

    ``x`` counts trials from 1; the first ``x >= min_trials`` at which one
    curve's moving average exceeds the other's by more than the sum of their
    moving variances decides.
    """
    a = np.asarray(curve_a, dtype=float)
    b = np.asarray(curve_b, dtype=float)
    if len(a) < min_trials or len(b) < min_trials:
        raise InsufficientDataError(f"need {min_trials} trials, got {len(a)} and {len(b)}")
    n = min(len(a), len(b))
    ma, va = moving_stats(a[:n], window)
    mb, vb = moving_stats(b[:n], window)
    for x in range(min_trials, n + 1):
        i = x - 1
        gap = ma[i] - mb[i]
        if gap > va[i] + vb[i]:
            return SuperiorityVerdict(ids[0], x, VerdictReason.SIGNIFICANT)
        if -gap > va[i] + vb[i]:
            return SuperiorityVerdict(ids[1], x, VerdictReason.SIGNIFICANT)
    return SuperiorityVerdict(None, None, VerdictReason.UNDECIDED)


@dataclass
class CandidateSession:
    record: HistoricalRecord
    trainer: Trainer
    stopped_at: int | None = None
    stopped_by: str | None = None

    @property
    def rewards(self) -> list[float]:
        return self.trainer.rewards


@dataclass
class SourceSelection:
    chosen: HistoricalRecord
    reason: VerdictReason
    sessions: list[CandidateSession]

    def summary(self) -> list[dict]:
        rows = []
        for s in self.sessions:
            smoothed = LearningCurve(list(s.rewards)).smoothed().smoothed_mean if s.rewards else []
            rows.append({
                "record_id": s.record.record_id,
                "trials_run": len(s.rewards),
                "stopped_at": s.stopped_at,
                "stopped_by": s.stopped_by,
                "final_smoothed": smoothed[-1] if smoothed else None,
                "chosen": s.record.record_id == self.chosen.record_id,
            })
        return rows


def _prefers_low_ratio(record: HistoricalRecord, target: ScenarioSpec) -> int:
    return 0 if record.preservation <= target.target_preservation else 1


def select_source(
    candidates: Sequence[HistoricalRecord],
    target: ScenarioSpec,
    max_trials: int,
    make_session,
    window: int = 21,
    min_trials: int = 30,
    tie_accuracy_at_max: bool = True,
    max_workers: int | None = None,
) -> SourceSelection:
    """Race one transfer session per candidate and keep the one that is not dominated.

    ``make_session(record) -> Trainer`` builds a seeded transfer session;
    sessions advance in lockstep (each trial runs the active sessions
    concurrently). After every trial from ``min_trials`` on, any session
    beaten by another active session is stopped. Survivors at ``max_trials``
    are ranked by smoothed final accuracy, then by ratio preference (sources
    with p <= target p first), then by record id.
    """
    if not candidates:
        raise InvalidArgumentError("select_source needs at least one candidate")
    ids = [c.record_id for c in candidates]
    if len(set(ids)) != len(ids):
        raise InvalidArgumentError("candidate record ids must be unique")
    if len(candidates) == 1:
        return SourceSelection(candidates[0], VerdictReason.UNDECIDED, [])
    if max_trials < 1:
        raise InvalidArgumentError("max_trials must be >= 1")
    order = sorted(candidates, key=lambda r: (_prefers_low_ratio(r, target), r.record_id))
    sessions = [CandidateSession(rec, make_session(rec)) for rec in order]
    workers = max_workers or len(sessions)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for trial in range(1, max_trials + 1):
            active = [s for s in sessions if s.stopped_at is None]
            if len(active) == 1:
                break
            list(pool.map(lambda s: s.trainer.step(), active))
            if trial < min_trials:
                continue
            for s in active:
                for other in active:
                    if other is s or other.stopped_at is not None and other.stopped_at < trial:
                        continue
                    v = superior(other.rewards, s.rewards, window, min_trials, (other.record.record_id, s.record.record_id))
                    if v.winner == other.record.record_id:
                        s.stopped_at, s.stopped_by = trial, other.record.record_id
                        break
    survivors = [s for s in sessions if s.stopped_at is None]
    if len(survivors) == 1:
        return SourceSelection(survivors[0].record, VerdictReason.SIGNIFICANT, sessions)
    if not survivors:  # mutual domination within one trial cannot happen (antisymmetry); defensive
        survivors = sessions

    def final_smoothed(s: CandidateSession) -> float:
        return LearningCurve(list(s.rewards)).smoothed(window).smoothed_mean[-1]

    if tie_accuracy_at_max:
        key = lambda s: (-final_smoothed(s), _prefers_low_ratio(s.record, target), s.record.record_id)
    else:
        key = lambda s: (_prefers_low_ratio(s.record, target), s.record.record_id)
    best = min(survivors, key=key)
    return SourceSelection(best.record, VerdictReason.MAX_TRIAL_TIEBREAK, sessions)


def transfer_session_factory(
    target: ScenarioSpec,
    config: AgentConfig,
    seed: int,
    trials: int,
    model=None,
):
    """Build seeded transfer sessions for :func:`select_source`; every candidate sees the same seed."""
    from .seeding import SeedStreams

    model = model if model is not None else make_model(target)

    def make(record: HistoricalRecord) -> Trainer:
        streams = SeedStreams(seed)
        cfg = AgentConfig.from_dict({**config.to_dict(), "invariant_mode": record.invariant_mode})
        agent = DdpgAgent(cfg, streams.generator("init"), streams.generator("agent-noise"), streams.generator("replay"))
        vanilla_transfer(record, agent)
        return Trainer(agent, target, trials, model=model, env_rng=streams.generator("env"))

    return make
