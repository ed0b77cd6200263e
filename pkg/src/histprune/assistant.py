"""History-driven action generation for the first trials of a session.

For each layer the assistant scores every historical (state, action,
accuracy) sample by state similarity and past accuracy, picks one, jitters
its action with shrinking uniform noise and hands it to the environment in
place of the actor. Episodes produced this way are admitted to the replay
buffer with a probability that falls off with their accuracy rank.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .agent import DdpgAgent, ReplayBuffer, TrainingRun, train
from .core import A_MIN, STATE_DIM, EpisodeTrace, ScenarioSpec
from .errors import AssistantUnavailableError, InvalidArgumentError, ShapeError

log = logging.getLogger(__name__)

ASSISTANT_COLUMNS = ["accept_probability", "accepted", "chosen_history_id", "similarity_S", "metric_M"]


@dataclass(frozen=True)
class AssistantConfig:
    sigma: float = 0.1
    omega: float = 2.0
    top_n: int = 3
    switch_trial: int = 30
    explore_phase_fraction: float = 0.5
    noise_amplitude0: float = 0.2
    accept_top_fraction: float = 1.0 / 3.0
    accept_decay: float = 4.0
    batch_window: int = 12
    update_during_assist: bool = True

    def __post_init__(self):
        if self.sigma <= 0:
            raise InvalidArgumentError("sigma must be positive")
        if self.top_n < 1:
            raise InvalidArgumentError("top_n must be >= 1")
        if not 0.0 < self.accept_top_fraction <= 1.0:
            raise InvalidArgumentError("accept_top_fraction must lie in (0, 1]")
        if self.switch_trial < 0 or self.batch_window < 1:
            raise InvalidArgumentError("switch_trial must be >= 0 and batch_window >= 1")

    @classmethod
    def from_dict(cls, data: dict | None) -> "AssistantConfig":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown assistant options: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class HistoryIndex:
    """Immutable table of historical per-layer samples."""

    states: np.ndarray  # (m, STATE_DIM)
    actions: np.ndarray  # (m,)
    performance: np.ndarray  # (m,), accuracy of the episode each sample came from
    sample_ids: tuple[str, ...]

    def __post_init__(self):
        m = len(self.actions)
        if self.states.shape != (m, STATE_DIM) or self.performance.shape != (m,) or len(self.sample_ids) != m:
            raise ShapeError("history index arrays disagree in length")
        self.states.setflags(write=False)
        self.actions.setflags(write=False)
        self.performance.setflags(write=False)

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_traces(cls, traces: Sequence[tuple[str, EpisodeTrace]]) -> "HistoryIndex":
        """Build from ``(source id, trace)`` pairs; ids become ``<source>:<trial>:<layer>``."""
        states, actions, perf, ids = [], [], [], []
        for src, tr in traces:
            for k, (s, a) in enumerate(zip(tr.states, tr.actions)):
                states.append(np.asarray(s, dtype=float))
                actions.append(float(a))
                perf.append(float(tr.accuracy))
                ids.append(f"{src}:{tr.trial_index}:{k}")
        return cls(
            np.array(states, dtype=float).reshape(-1, STATE_DIM),
            np.array(actions, dtype=float),
            np.array(perf, dtype=float),
            tuple(ids),
        )

    @classmethod
    def from_records(cls, records, target: ScenarioSpec, model=None, augment: bool = True, top_k: int | None = None):
        """Index the traces of historical records, re-expressed for ``target`` unless ``augment`` is off.

        ``top_k`` keeps only the most accurate traces of each record.
        """
        from .transfer import augmented_traces

        pairs = []
        for rec in records:
            traces = sorted(rec.traces, key=lambda t: (-t.accuracy, t.trial_index))
            traces = traces if top_k is None else traces[:top_k]
            if augment:
                got, _ = augmented_traces([_with_traces(rec, traces)], target, model)
                pairs.extend(got)
            else:
                pairs.extend((rec.record_id, t) for t in traces)
        return cls.from_traces(pairs)


def _with_traces(record, traces):
    from dataclasses import replace

    return replace(record, traces=list(traces))


def similarity(h, i, sigma: float = 0.1):
    """Product of per-coordinate Gaussians exp(-(h - i)^2 / (2 sigma^2)); identical states give 1.

    ``h`` may be a single state or a stack of states (last axis = features).
    """
    h = np.asarray(h, dtype=float)
    i = np.asarray(i, dtype=float)
    if h.shape[-1] != i.shape[-1]:
        raise ShapeError(f"state dimensions differ: {h.shape[-1]} vs {i.shape[-1]}")
    # one exp of the summed exponent equals the product of the per-coordinate terms
    out = np.exp(-np.sum((h - i) ** 2, axis=-1) / (2.0 * sigma * sigma))
    return float(out) if out.ndim == 0 else out


def selection_metric(s, p, omega: float = 2.0):
    """M = S**omega + P."""
    out = np.power(s, omega) + np.asarray(p, dtype=float)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Selection:
    action: float
    sample_id: str
    similarity: float
    metric: float


def select_sample(index: HistoryIndex, state, trial: int, cfg: AssistantConfig, rng: np.random.Generator) -> Selection:
    """Pick a historical sample for ``state``: random among the top-n early, best later."""
    if len(index) == 0:
        raise AssistantUnavailableError("history index is empty")
    s = similarity(index.states, np.asarray(state, dtype=float), cfg.sigma)
    s = np.atleast_1d(s)
    m = np.atleast_1d(selection_metric(s, index.performance, cfg.omega))
    # stable sort: equal metrics keep index order
    ranked = np.argsort(-m, kind="stable")
    if trial < cfg.explore_phase_fraction * cfg.switch_trial:
        top = ranked[: min(cfg.top_n, len(ranked))]
        j = int(top[rng.integers(len(top))])
    else:
        j = int(ranked[0])
    return Selection(float(index.actions[j]), index.sample_ids[j], float(s[j]), float(m[j]))


def noise_amplitude(trial: int, cfg: AssistantConfig) -> float:
    if cfg.switch_trial == 0:
        return 0.0
    return cfg.noise_amplitude0 * max(0.0, 1.0 - trial / cfg.switch_trial)


def perturb(action: float, trial: int, cfg: AssistantConfig, rng: np.random.Generator, a_min: float = A_MIN) -> float:
    """Add U(-A, A) with A shrinking linearly to 0 at the switch trial, then clamp."""
    amp = noise_amplitude(trial, cfg)
    return float(min(1.0, max(a_min, action + rng.uniform(-amp, amp))))


def accept_probability(rank: int, window_size: int, cfg: AssistantConfig) -> float:
    """1 within the top fraction of the window, exponentially smaller below it."""
    if not 1 <= rank <= window_size:
        raise InvalidArgumentError(f"rank {rank} outside 1..{window_size}")
    # small guard so that fractions like 1/3 of 9 do not round up past 3
    top = math.ceil(cfg.accept_top_fraction * window_size - 1e-12)
    if rank <= top:
        return 1.0
    return math.exp(-cfg.accept_decay * (rank - top) / window_size)


def window_rank(history: Sequence[float], value: float) -> int:
    """1-based rank of ``value`` among ``history`` (which includes it); ties share the better rank."""
    return 1 + sum(1 for h in history if h > value)


class AssistantHooks:
    """Training hooks implementing the action switch and the acceptance draw."""

    def __init__(self, index: HistoryIndex, cfg: AssistantConfig, rng: np.random.Generator):
        self.index = index
        self.cfg = cfg
        self.rng = rng
        self.recent: list[float] = []
        self._picks: list[Selection] = []

    def begin_trial(self, trial: int):
        if trial >= self.cfg.switch_trial:
            return None
        self._picks = []

        def provide(state, k):
            sel = select_sample(self.index, state, trial, self.cfg, self.rng)
            self._picks.append(sel)
            return perturb(sel.action, trial, self.cfg, self.rng)

        return provide

    def end_trial(self, trial: int, trace: EpisodeTrace) -> tuple[float, dict]:
        self.recent = (self.recent + [trace.accuracy])[-self.cfg.batch_window:]
        if trial >= self.cfg.switch_trial:
            return 1.0, {"accept_probability": 1.0, "chosen_history_id": "", "similarity_S": "", "metric_M": ""}
        rank = window_rank(self.recent, trace.accuracy)
        prob = accept_probability(rank, len(self.recent), self.cfg)
        extra = {
            "accept_probability": prob,
            "chosen_history_id": ";".join(p.sample_id for p in self._picks),
            "similarity_S": float(np.mean([p.similarity for p in self._picks])),
            "metric_M": float(np.mean([p.metric for p in self._picks])),
            "noise_std": noise_amplitude(trial, self.cfg),
        }
        return prob, extra


def assisted_train(
    agent: DdpgAgent,
    scenario: ScenarioSpec,
    index: HistoryIndex | None,
    cfg: AssistantConfig,
    trials: int,
    rng: np.random.Generator,
    buffer: ReplayBuffer | None = None,
    **kwargs,
) -> TrainingRun:
    """Train with assistant-generated actions for the first ``cfg.switch_trial`` trials.

    With an empty (or missing) index, or ``switch_trial == 0``, this is plain :func:`train`.
    """
    if index is None or len(index) == 0:
        if cfg.switch_trial > 0:
            log.warning("assistant unavailable (empty history index); training without it")
        return train(agent, scenario, trials, buffer=buffer, **kwargs)
    if cfg.switch_trial == 0:
        return train(agent, scenario, trials, buffer=buffer, **kwargs)
    hooks = AssistantHooks(index, cfg, rng)
    update_during = None
    if not cfg.update_during_assist:
        update_during = lambda t: t >= cfg.switch_trial
    return train(agent, scenario, trials, buffer=buffer, hooks=hooks, accept_rng=rng,
                 update_during=update_during, **kwargs)
