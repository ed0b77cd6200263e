"""DDPG actor-critic, replay buffer and the episode / training loops."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Protocol, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .core import A_MIN, STATE_DIM, EpisodeTrace, LearningCurve, ScenarioSpec, Transition
from .env import EnvironmentSession, make_model
from .errors import InvalidArgumentError, NumericError
from .netlib import (
    AdamState,
    MlpGrads,
    MlpParams,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    soft_update,
)

log = logging.getLogger(__name__)

ACTION_FLOOR = 1e-6
CRITIC_TARGETS = ("return-to-go", "bootstrap")

# Per-layer action provider used instead of the actor (assistant path).
ActionOverride = Callable[[np.ndarray, int], float]


@dataclass
class AgentConfig:
    hidden: int = 64
    actor_lr: float = 1e-3
    critic_lr: float = 3e-3
    tau: float = 0.05
    discount: float = 1.0
    batch_size: int = 64
    buffer_capacity: int = 2000
    noise_start: float = 0.5
    noise_end: float = 0.05
    noise_anneal_fraction: float = 0.6
    invariant_mode: bool = False
    invariant_ceiling: float = 2.5
    updates_per_transition: int = 2
    project_actor: bool = True
    actor_warmup_trials: int = 0  # critic-only updates before the actor starts learning
    # invariant mode: quadratic pull on pre-clamp actions outside [a_min, min(1, upper)]
    saturation_penalty: float = 1.0
    critic_target: str = "return-to-go"  # or "bootstrap"

    def __post_init__(self):
        if self.critic_target not in CRITIC_TARGETS:
            raise InvalidArgumentError(f"critic_target must be one of {CRITIC_TARGETS}")
        if self.saturation_penalty < 0:
            raise InvalidArgumentError("saturation_penalty must be >= 0")

    @classmethod
    def from_dict(cls, data: dict | None) -> "AgentConfig":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown agent options: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def noise_std(cfg: AgentConfig, trial: int, horizon: int) -> float:
    """Linearly annealed exploration std, flat after ``noise_anneal_fraction * horizon`` trials."""
    span = max(1.0, cfg.noise_anneal_fraction * horizon)
    frac = min(1.0, trial / span)
    return cfg.noise_start + (cfg.noise_end - cfg.noise_start) * frac


def truncated_normal(rng: np.random.Generator, mean: float, std: float, lo: float = 0.0, hi: float = 1.0) -> float:
    """Inverse-CDF sample of N(mean, std) restricted to [lo, hi]."""
    if std <= 0:
        return float(min(hi, max(lo, mean)))
    a, b = ndtr((lo - mean) / std), ndtr((hi - mean) / std)
    if b - a < 1e-12:
        return float(lo if mean < lo else hi)
    u = rng.uniform(a, b)
    return float(min(hi, max(lo, mean + std * ndtri(u))))


def wrap_invariant(f, p: float, a_min: float = A_MIN):
    """Per-layer action from the scenario-invariant actor output: clamp(f * p, a_min, 1)."""
    return np.clip(np.asarray(f, dtype=float) * p, a_min, 1.0)


class ReplayBuffer:
    """FIFO ring of transitions with uniform sampling.

    ``acceptance_policy`` (optional) maps ``(trial, accuracy)`` to the
    probability an episode is admitted; probability 1 never consumes
    randomness, so an always-accept policy is indistinguishable from none.
    """

    def __init__(self, capacity: int = 2000, acceptance_policy: Callable[[int, float], float] | None = None):
        if capacity < 1:
            raise InvalidArgumentError("capacity must be >= 1")
        self.capacity = capacity
        self.acceptance_policy = acceptance_policy
        self.states = np.zeros((capacity, STATE_DIM))
        self.actions = np.zeros(capacity)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, STATE_DIM))
        self.terminals = np.zeros(capacity)
        self.uppers = np.ones(capacity)
        self.next_uppers = np.ones(capacity)
        self.outcomes = np.full(capacity, np.nan)
        self.steps_to_end = np.zeros(capacity)
        self.pos = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition) -> None:
        i = self.pos
        self.states[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.next_states[i] = t.next_state
        self.terminals[i] = float(t.terminal)
        self.uppers[i] = t.upper
        self.next_uppers[i] = t.next_upper
        self.outcomes[i] = t.outcome
        self.steps_to_end[i] = t.steps_to_end
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push_episode(
        self,
        transitions: Sequence[Transition],
        rng: np.random.Generator | None = None,
        probability: float | None = None,
        trial: int = 0,
        accuracy: float = 0.0,
    ) -> bool:
        """Insert a whole episode subject to the acceptance probability."""
        if probability is None:
            probability = 1.0 if self.acceptance_policy is None else self.acceptance_policy(trial, accuracy)
        if probability < 1.0:
            if rng is None:
                raise InvalidArgumentError("an rng is required for probabilistic acceptance")
            if rng.random() >= probability:
                return False
        for t in transitions:
            self.push(t)
        return True

    def contents(self) -> list[Transition]:
        """Transitions in insertion order (oldest first)."""
        start = self.pos if self.size == self.capacity else 0
        idx = [(start + j) % self.capacity for j in range(self.size)]
        return [
            Transition(self.states[i].copy(), float(self.actions[i]), float(self.rewards[i]),
                       self.next_states[i].copy(), bool(self.terminals[i]),
                       float(self.uppers[i]), float(self.next_uppers[i]),
                       float(self.outcomes[i]), int(self.steps_to_end[i]))
            for i in idx
        ]

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx],
                     self.terminals[idx], self.uppers[idx], self.next_uppers[idx],
                     self.outcomes[idx], self.steps_to_end[idx])


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    uppers: np.ndarray | None = None
    next_uppers: np.ndarray | None = None
    outcomes: np.ndarray | None = None
    steps_to_end: np.ndarray | None = None

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "Batch":
        return cls(
            np.array([t.state for t in transitions], dtype=float),
            np.array([t.action for t in transitions], dtype=float),
            np.array([t.reward for t in transitions], dtype=float),
            np.array([t.next_state for t in transitions], dtype=float),
            np.array([float(t.terminal) for t in transitions]),
            np.array([t.upper for t in transitions], dtype=float),
            np.array([t.next_upper for t in transitions], dtype=float),
            np.array([t.outcome for t in transitions], dtype=float),
            np.array([t.steps_to_end for t in transitions], dtype=float),
        )

    def __len__(self):
        return len(self.actions)


class DdpgAgent:
    def __init__(self, config: AgentConfig, rng: np.random.Generator, noise_rng: np.random.Generator | None = None,
                 replay_rng: np.random.Generator | None = None):
        self.config = config
        h = config.hidden
        self.actor = init_mlp((STATE_DIM, h, h, 1), "sigmoid", rng)
        self.critic = init_mlp((STATE_DIM + 1, h, h, 1), "identity", rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.reset_optimizers()
        self.noise_rng = noise_rng if noise_rng is not None else np.random.default_rng(0)
        self.replay_rng = replay_rng if replay_rng is not None else np.random.default_rng(1)
        self.preservation = 1.0  # target p; only used in invariant mode
        self.horizon = 1  # trials in the current training run, for the noise schedule

    @property
    def invariant_mode(self) -> bool:
        return self.config.invariant_mode

    @property
    def discount(self) -> float:
        return self.config.discount

    def reset_optimizers(self) -> None:
        self.actor_opt = AdamState.zeros_like(self.actor, self.config.actor_lr)
        self.critic_opt = AdamState.zeros_like(self.critic, self.config.critic_lr)

    # -- policy -----------------------------------------------------------

    def actor_scale(self) -> float:
        """d(action)/d(sigmoid output) before clamping."""
        if self.invariant_mode:
            return self.config.invariant_ceiling * self.preservation
        return 1.0

    def policy(self, actor: MlpParams, states: np.ndarray) -> np.ndarray:
        """Deterministic action(s) of ``actor``; pre-clamp values come from :meth:`pre_clamp`."""
        return self._policy_from_output(mlp_forward(actor, states)[..., 0])

    def _policy_from_output(self, out: np.ndarray) -> np.ndarray:
        raw = self.actor_scale() * out
        if self.invariant_mode:
            return np.clip(raw, A_MIN, 1.0)
        return np.maximum(raw, ACTION_FLOOR)

    def pre_clamp(self, actor: MlpParams, states: np.ndarray) -> np.ndarray:
        out = mlp_forward(actor, states)[..., 0]
        if self.invariant_mode:
            # invariant I = ceiling * sigmoid, action = I * p
            return self.config.invariant_ceiling * out * self.preservation
        return out

    def noise_std(self, trial: int) -> float:
        return noise_std(self.config, trial, self.horizon)

    def act(self, state: np.ndarray, explore: bool = False, trial: int = 0) -> float:
        mean = float(self.policy(self.actor, np.asarray(state, dtype=float)))
        if not np.isfinite(mean):
            raise NumericError("actor produced a non-finite action")
        if not explore:
            return mean
        a = truncated_normal(self.noise_rng, mean, self.noise_std(trial), 0.0, 1.0)
        return max(a, ACTION_FLOOR)

    # -- learning ---------------------------------------------------------

    def critic_targets(self, batch: Batch) -> np.ndarray:
        """Regression targets for the critic.

        ``bootstrap``: r + gamma * (1 - terminal) * Q'(s', mu'(s')).
        ``return-to-go``: gamma**steps_to_end * outcome, i.e. the observed
        discounted return of the episode (reward is terminal-only); rows
        without a recorded outcome fall back to the bootstrap target.
        """
        if self.config.critic_target == "return-to-go" and batch.outcomes is not None:
            known = np.isfinite(batch.outcomes)
            mc = np.where(known, self.discount ** batch.steps_to_end * np.nan_to_num(batch.outcomes), 0.0)
            if known.all():
                return mc
            return np.where(known, mc, self._bootstrap_targets(batch))
        return self._bootstrap_targets(batch)

    def _bootstrap_targets(self, batch: Batch) -> np.ndarray:
        next_a = self.policy(self.target_actor, batch.next_states)
        if batch.next_uppers is not None:
            # the environment would clamp the target action to the budget ceiling
            next_a = np.minimum(next_a, batch.next_uppers)
        q_next = mlp_forward(self.target_critic, np.column_stack([batch.next_states, next_a]))[:, 0]
        return batch.rewards + self.discount * (1.0 - batch.terminals) * q_next

    def critic_loss_and_grads(self, batch: Batch, critic: MlpParams | None = None) -> tuple[float, MlpGrads]:
        """Mean squared Bellman error and its gradient for the online critic."""
        critic = self.critic if critic is None else critic
        y = self.critic_targets(batch)
        x = np.column_stack([batch.states, batch.actions])
        cache = mlp_forward_cached(critic, x)
        diff = cache.output[:, 0] - y
        loss = float(np.mean(diff**2))
        grads, _ = mlp_backward(critic, x, (2.0 / len(batch) * diff)[:, None], cache)
        return loss, grads

    def actor_objective_and_grads(self, batch: Batch, actor: MlpParams | None = None) -> tuple[float, MlpGrads]:
        """Mean critic value of the actor's actions and its gradient (ascent direction).

        In invariant mode the pre-clamp action can overshoot the feasible
        range (the ceiling lets it exceed 1), where the clamp has zero slope.
        A quadratic penalty on the overshoot keeps those layers trainable.
        """
        actor = self.actor if actor is None else actor
        actor_cache = mlp_forward_cached(actor, batch.states)
        out = actor_cache.output[:, 0]
        raw = self.actor_scale() * out
        a = self._policy_from_output(out)
        free = np.ones_like(a)
        if self.invariant_mode:
            free = ((raw >= A_MIN) & (raw <= 1.0)).astype(float)
        hi = np.ones_like(a)
        if self.config.project_actor and batch.uppers is not None:
            free = free * (a <= batch.uppers)
            a = np.minimum(a, batch.uppers)
            hi = np.minimum(hi, batch.uppers)
        x = np.column_stack([batch.states, a])
        critic_cache = mlp_forward_cached(self.critic, x)
        n = len(batch)
        _, dx = mlp_backward(self.critic, x, np.full((n, 1), 1.0 / n), critic_cache)
        dq_da = dx[:, -1] * free
        objective = float(np.mean(critic_cache.output[:, 0]))
        lam = self.config.saturation_penalty
        if self.invariant_mode and lam > 0:
            over = np.maximum(raw - hi, 0.0)
            under = np.maximum(A_MIN - raw, 0.0)
            objective -= lam * float(np.mean(over ** 2 + under ** 2))
            dq_da = dq_da + 2.0 * lam * (under - over) / n
        grads, _ = mlp_backward(actor, batch.states, (dq_da * self.actor_scale())[:, None], actor_cache)
        return objective, grads

    def update(self, batch: Batch | Sequence[Transition], update_actor: bool = True) -> tuple[float, float]:
        """One critic step, one actor step, then soft target updates."""
        if not isinstance(batch, Batch):
            batch = Batch.from_transitions(batch)
        if len(batch) == 0:
            raise InvalidArgumentError("empty batch")
        critic_loss, cgrads = self.critic_loss_and_grads(batch)
        if not np.isfinite(critic_loss):
            raise NumericError("non-finite critic loss")
        objective, agrads = self.actor_objective_and_grads(batch)
        if not np.isfinite(objective):
            raise NumericError("non-finite actor objective")
        critic, critic_opt = adam_step(self.critic, cgrads, self.critic_opt)
        if update_actor:
            actor, actor_opt = adam_step(self.actor, agrads.scaled(-1.0), self.actor_opt)
            self.actor, self.actor_opt = actor, actor_opt
        self.critic, self.critic_opt = critic, critic_opt
        tau = self.config.tau
        self.target_critic = soft_update(self.target_critic, self.critic, tau)
        self.target_actor = soft_update(self.target_actor, self.actor, tau)
        return critic_loss, objective


def run_episode(
    agent: DdpgAgent,
    session: EnvironmentSession,
    explore: bool = True,
    trial: int = 0,
    action_override: ActionOverride | None = None,
) -> EpisodeTrace:
    if session.cursor != 0:
        raise InvalidArgumentError("run_episode needs a fresh session")
    agent.preservation = session.scenario.target_preservation
    states, actions, uppers = [], [], []
    state = session.state()
    while not session.done:
        k = session.cursor
        uppers.append(session.action_bounds()[1])
        if action_override is not None:
            raw = action_override(state, k)
        else:
            raw = agent.act(state, explore, trial)
        states.append(state)
        applied, state, _ = session.step(raw)
        actions.append(applied)
    return EpisodeTrace(
        scenario_id=session.scenario.scenario_id,
        states=np.array(states),
        actions=np.array(actions),
        accuracy=session.evaluate(),
        trial_index=trial,
        upper_bounds=np.array(uppers),
    )


CSV_COLUMNS = ["trial_index", "raw_accuracy", "ema_accuracy", "buffer_size", "noise_std", "action_source"]


@dataclass
class TrialRow:
    trial_index: int
    raw_accuracy: float
    ema_accuracy: float
    buffer_size: int
    noise_std: float
    action_source: str = "agent"
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        row = {k: getattr(self, k) for k in CSV_COLUMNS}
        row.update(self.extra)
        return row


class TrainingHooks(Protocol):
    def begin_trial(self, trial: int) -> ActionOverride | None: ...

    def end_trial(self, trial: int, trace: EpisodeTrace) -> tuple[float, dict]:
        """Return (acceptance probability, extra CSV fields)."""
        ...


@dataclass
class TrainingRun:
    curve: LearningCurve
    rows: list[TrialRow]
    traces: list[EpisodeTrace]

    @property
    def best_accuracy(self) -> float:
        return max(self.curve.rewards)


class Trainer:
    """Trial-at-a-time training loop; :func:`train` drives it to completion.

    Per trial: roll one episode, route it through the buffer's acceptance,
    then (once the buffer holds a batch) do one update per layer transition.
    """

    def __init__(
        self,
        agent: DdpgAgent,
        scenario: ScenarioSpec,
        trials: int,
        buffer: ReplayBuffer | None = None,
        model=None,
        env_rng: np.random.Generator | None = None,
        accept_rng: np.random.Generator | None = None,
        hooks: TrainingHooks | None = None,
        update_during: Callable[[int], bool] | None = None,
    ):
        if trials < 1:
            raise InvalidArgumentError("trials must be >= 1")
        self.agent = agent
        self.scenario = scenario
        self.trials = trials
        self.buffer = buffer if buffer is not None else ReplayBuffer(agent.config.buffer_capacity)
        self.model = model if model is not None else make_model(scenario)
        self.env_rng = env_rng
        self.accept_rng = accept_rng
        self.hooks = hooks
        self.update_during = update_during
        self.trial = 0
        self.rewards: list[float] = []
        self.rows: list[TrialRow] = []
        self.traces: list[EpisodeTrace] = []
        self._ema: float | None = None
        agent.horizon = trials
        agent.preservation = scenario.target_preservation

    @property
    def finished(self) -> bool:
        return self.trial >= self.trials

    def step(self) -> TrialRow:
        t = self.trial
        agent = self.agent
        override = self.hooks.begin_trial(t) if self.hooks is not None else None
        session = EnvironmentSession(self.scenario, self.model, self.env_rng)
        trace = run_episode(agent, session, explore=True, trial=t, action_override=override)
        extra: dict = {}
        probability = None
        if self.hooks is not None:
            probability, extra = self.hooks.end_trial(t, trace)
        accepted = self.buffer.push_episode(trace.transitions(), self.accept_rng, probability, t, trace.accuracy)
        if self.hooks is not None:
            extra["accepted"] = int(accepted)
        if len(self.buffer) >= agent.config.batch_size and (self.update_during is None or self.update_during(t)):
            update_actor = t >= agent.config.actor_warmup_trials
            for _ in range(self.scenario.n_layers * agent.config.updates_per_transition):
                agent.update(self.buffer.sample(agent.config.batch_size, agent.replay_rng), update_actor)
        acc = trace.accuracy
        noise = extra.pop("noise_std", None)
        self._ema = acc if self._ema is None else 0.5 * self._ema + 0.5 * acc
        row = TrialRow(
            trial_index=t,
            raw_accuracy=acc,
            ema_accuracy=self._ema,
            buffer_size=len(self.buffer),
            noise_std=agent.noise_std(t) if noise is None else noise,
            action_source="assistant" if override is not None else "agent",
            extra=extra,
        )
        self.rewards.append(acc)
        self.rows.append(row)
        self.traces.append(trace)
        self.trial += 1
        return row

    def __iter__(self) -> Iterator[TrialRow]:
        while not self.finished:
            yield self.step()

    def result(self) -> TrainingRun:
        return TrainingRun(LearningCurve(list(self.rewards)).smoothed(21), self.rows, self.traces)


def train(agent: DdpgAgent, scenario: ScenarioSpec, trials: int, **kwargs) -> TrainingRun:
    trainer = Trainer(agent, scenario, trials, **kwargs)
    for _ in trainer:
        pass
    return trainer.result()


def greedy_policy(agent: DdpgAgent, scenario: ScenarioSpec, model=None) -> EpisodeTrace:
    """Noise-free rollout of the current actor."""
    session = EnvironmentSession(scenario, model)
    return run_episode(agent, session, explore=False)
