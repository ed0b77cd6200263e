"""Pruning environments: the layer-by-layer MDP the agent interacts with.

Two behaviors are available. :class:`SyntheticNetModel` is a closed-form
accuracy surrogate; :class:`LinearReconModel` prunes the input channels of
linear layers by lasso channel selection and scores the reconstruction error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import A_MIN, STATE_DIM, EnvironmentKind, EpisodeTrace, ScenarioSpec, build_state
from .errors import InfeasibleScenarioError, InvalidArgumentError, ProtocolError, ShapeError

BUDGET_TOL = 1e-9


@dataclass(frozen=True)
class SyntheticNetModel:
    """accuracy = base - sum w_k (1-a_k)^q - gamma_c * sum_{critical} (1-a_k)."""

    base_accuracy: float
    layer_importance: tuple[float, ...]
    critical: tuple[bool, ...]
    criticality_penalty: float = 0.0
    curvature: float = 2.0
    noise_std: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "layer_importance", tuple(float(w) for w in self.layer_importance))
        object.__setattr__(self, "critical", tuple(bool(c) for c in self.critical))
        if not 0.0 < self.base_accuracy <= 1.0:
            raise InvalidArgumentError("base_accuracy must lie in (0, 1]")
        if any(w < 0 for w in self.layer_importance):
            raise InvalidArgumentError("layer importances must be non-negative")
        if self.curvature < 1.0 or self.criticality_penalty < 0:
            raise InvalidArgumentError("curvature must be >= 1 and criticality_penalty >= 0")
        if len(self.critical) != len(self.layer_importance):
            raise ShapeError("critical mask length differs from layer_importance")

    @classmethod
    def from_scenario(cls, scenario: ScenarioSpec) -> "SyntheticNetModel":
        cfg = scenario.environment
        n = scenario.n_layers
        return cls(
            base_accuracy=float(cfg.get("base_accuracy", 0.9)),
            layer_importance=tuple(cfg.get("layer_importance", [0.5 / n] * n)),
            critical=tuple(bool(layer.critical) for layer in scenario.layers),
            criticality_penalty=float(cfg.get("criticality_penalty", 0.0)),
            curvature=float(cfg.get("curvature", 2.0)),
            noise_std=float(cfg.get("noise_std", 0.0)),
        )

    def evaluate(self, actions: Sequence[float]) -> float:
        return evaluate_synthetic(self, actions)


def evaluate_synthetic(model: SyntheticNetModel, actions: Sequence[float]) -> float:
    a = np.asarray(actions, dtype=float)
    if a.shape != (len(model.layer_importance),):
        raise ShapeError(f"expected {len(model.layer_importance)} actions, got shape {a.shape}")
    if np.any(a <= 0) or np.any(a > 1):
        raise InvalidArgumentError("actions must lie in (0, 1]")
    gap = 1.0 - a
    deficit = float(np.dot(model.layer_importance, gap**model.curvature))
    deficit += model.criticality_penalty * float(gap[np.asarray(model.critical, dtype=bool)].sum())
    return float(min(1.0, max(0.0, model.base_accuracy - deficit)))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class ChannelSelection:
    kept_indices: tuple[int, ...]
    reconstruction_error: float
    fallback: bool = False  # re-fit system was rank deficient


def _lasso_cd(z: np.ndarray, y: np.ndarray, lam: float, beta0: np.ndarray, sweeps: int = 500, tol: float = 1e-12):
    """Coordinate descent for 0.5*||y - z beta||^2 + lam*||beta||_1."""
    beta = beta0.copy()
    col_sq = np.einsum("ij,ij->j", z, z)
    resid = y - z @ beta
    for _ in range(sweeps):
        max_delta = 0.0
        for j in range(z.shape[1]):
            if col_sq[j] == 0.0:
                beta[j] = 0.0
                continue
            old = beta[j]
            rho = z[:, j] @ resid + col_sq[j] * old
            new = math.copysign(max(abs(rho) - lam, 0.0), rho) / col_sq[j]
            if new != old:
                resid -= z[:, j] * (new - old)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta <= tol * (1.0 + np.abs(beta).max()):
            break
    return beta


def refit_error(weight: np.ndarray, inputs: np.ndarray, kept: Sequence[int]) -> tuple[float, bool]:
    """Squared Frobenius residual of re-fitting ``inputs @ weight.T`` from the kept channels."""
    target = inputs @ weight.T
    kept = list(kept)
    if not kept:
        return float(np.sum(target**2)), False
    xs = inputs[:, kept]
    sol, _, rank, _ = np.linalg.lstsq(xs, target, rcond=None)
    resid = target - xs @ sol
    return float(np.sum(resid**2)), bool(rank < len(kept))


def channel_select(weight: np.ndarray, inputs: np.ndarray, keep: int, l1_strength: float | None = None) -> ChannelSelection:
    """Choose ``keep`` input channels by lasso on per-channel gates, then re-fit.

    The gate problem is ``min_beta 0.5*||vec(Y) - sum_j beta_j vec(x_j w_j^T)||^2
    + lam*||beta||_1`` with ``Y = inputs @ weight.T``. ``lam`` is bisected until
    exactly ``keep`` gates are nonzero (or ``l1_strength`` is used directly when
    given and already yields at most ``keep`` channels). The kept channels are
    then re-fit by ordinary least squares.
    """
    weight = np.asarray(weight, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    n_in = weight.shape[1]
    if inputs.shape[1] != n_in:
        raise ShapeError(f"inputs have {inputs.shape[1]} channels, weight expects {n_in}")
    if not 1 <= keep <= n_in:
        raise InvalidArgumentError(f"keep must lie in [1, {n_in}], got {keep}")
    if keep == n_in:
        err, fallback = refit_error(weight, inputs, range(n_in))
        return ChannelSelection(tuple(range(n_in)), err, fallback)

    y = (inputs @ weight.T).ravel()
    # column j is vec(x_j w_j^T): channel j's contribution to the layer output
    z = np.stack([np.outer(inputs[:, j], weight[:, j]).ravel() for j in range(n_in)], axis=1)
    z_norm = np.sqrt(np.einsum("ij,ij->j", z, z))
    lam_hi = float(np.max(np.abs(z.T @ y)))
    beta = np.zeros(n_in)

    def support(b):
        return np.flatnonzero(np.abs(b) > 1e-12)

    chosen = None
    if l1_strength is not None and l1_strength > 0:
        b = _lasso_cd(z, y, l1_strength, beta)
        if len(support(b)) == keep:
            chosen = b
    if chosen is None:
        lo, hi = 0.0, lam_hi
        best_over = None  # smallest-lambda solution seen with more than keep nonzeros
        for _ in range(80):
            lam = 0.5 * (lo + hi)
            beta = _lasso_cd(z, y, lam, beta)
            count = len(support(beta))
            if count == keep:
                chosen = beta
                break
            if count > keep:
                lo = lam
                best_over = beta.copy()
            else:
                hi = lam
        if chosen is None:
            # count never hit exactly; rank the over-full solution by gate magnitude
            fallback_beta = best_over if best_over is not None else _lasso_cd(z, y, 0.0, beta)
            chosen = fallback_beta
    score = np.abs(chosen) * z_norm
    kept = np.sort(np.argsort(-score, kind="stable")[:keep])
    err, fallback = refit_error(weight, inputs, kept)
    return ChannelSelection(tuple(int(k) for k in kept), err, fallback)


@dataclass(frozen=True)
class ReconLayer:
    weight: np.ndarray  # (out, in)
    inputs: np.ndarray  # (n, in)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def energy(self) -> float:
        return float(np.sum((self.inputs @ self.weight.T) ** 2))


@dataclass(frozen=True)
class LinearReconModel:
    layers: tuple[ReconLayer, ...]
    l1_strength: float = 0.0
    noise_std: float = 0.0
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        for k, layer in enumerate(self.layers):
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.inputs))):
                raise InvalidArgumentError(f"layer {k}: non-finite matrices")
            if layer.inputs.shape[0] < layer.in_channels:
                raise InvalidArgumentError(f"layer {k}: need at least as many samples as input channels")

    @classmethod
    def generate(cls, scenario: ScenarioSpec, seed: int, n_samples: int = 64, l1_strength: float = 0.0, noise_std: float = 0.0):
        """Random instance whose channels differ in scale, so some matter more than others."""
        rng = np.random.default_rng(seed)
        layers = []
        for layer in scenario.layers:
            n_in, n_out = layer.in_channels, layer.out_channels
            scale = rng.uniform(0.2, 2.0, size=n_in)
            inputs = rng.standard_normal((max(n_samples, n_in), n_in)) * scale
            weight = rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)
            layers.append(ReconLayer(weight, inputs))
        return cls(tuple(layers), l1_strength, noise_std)

    @classmethod
    def from_scenario(cls, scenario: ScenarioSpec) -> "LinearReconModel":
        cfg = scenario.environment
        l1 = float(cfg.get("l1_strength", 0.0))
        noise = float(cfg.get("noise_std", 0.0))
        if "layers" in cfg:
            layers = tuple(
                ReconLayer(np.asarray(d["weight"], dtype=float), np.asarray(d["inputs"], dtype=float))
                for d in cfg["layers"]
            )
            return cls(layers, l1, noise)
        return cls.generate(scenario, int(cfg.get("seed", 0)), int(cfg.get("n_samples", 64)), l1, noise)

    def select(self, k: int, keep: int) -> ChannelSelection:
        key = (k, keep)
        hit = self._cache.get(key)
        if hit is None:
            layer = self.layers[k]
            hit = channel_select(layer.weight, layer.inputs, keep, self.l1_strength or None)
            self._cache[key] = hit
        return hit

    def evaluate(self, actions: Sequence[float]) -> float:
        return evaluate_recon(self, actions)


def evaluate_recon(model: LinearReconModel, actions: Sequence[float]) -> float:
    a = np.asarray(actions, dtype=float)
    if a.shape != (len(model.layers),):
        raise ShapeError(f"expected {len(model.layers)} actions, got shape {a.shape}")
    total_err = 0.0
    total_energy = 0.0
    for k, (layer, ak) in enumerate(zip(model.layers, a)):
        keep = min(layer.in_channels, max(1, round_half_up(ak * layer.in_channels)))
        total_err += model.select(k, keep).reconstruction_error
        total_energy += layer.energy
    if total_energy == 0.0:
        return 1.0
    return float(min(1.0, max(0.0, 1.0 - total_err / total_energy)))


def make_model(scenario: ScenarioSpec):
    if scenario.environment_kind == EnvironmentKind.LINEAR_RECON:
        return LinearReconModel.from_scenario(scenario)
    return SyntheticNetModel.from_scenario(scenario)


def check_feasible(scenario: ScenarioSpec, a_min: float = A_MIN) -> None:
    """Raise if pruning every layer to ``a_min`` still exceeds the budget."""
    flops = scenario.flops
    budget = scenario.target_preservation * flops.sum()
    cum = np.cumsum(a_min * flops)
    over = np.flatnonzero(cum > budget + BUDGET_TOL * flops.sum())
    if len(over):
        k = int(over[0])
        raise InfeasibleScenarioError(
            f"scenario {scenario.scenario_id!r} infeasible: layers 0..{k} at a_min={a_min} already exceed "
            f"preservation budget {scenario.target_preservation}",
            layer=k,
        )


class EnvironmentSession:
    """One episode walking the layers of ``scenario`` in order."""

    def __init__(self, scenario: ScenarioSpec, model=None, rng: np.random.Generator | None = None, a_min: float = A_MIN):
        check_feasible(scenario, a_min)
        self.scenario = scenario
        self.model = model if model is not None else make_model(scenario)
        self.rng = rng
        self.a_min = a_min
        self.cursor = 0
        self.chosen_actions: list[float] = []
        self._flops = scenario.flops
        self._total = float(self._flops.sum())

    @property
    def done(self) -> bool:
        return self.cursor >= self.scenario.n_layers

    def state(self) -> np.ndarray:
        """Observation for the current layer (the all-zeros sentinel once done)."""
        if self.done:
            return np.zeros(STATE_DIM)
        k = self.cursor
        chosen = np.asarray(self.chosen_actions)
        reduced = float(np.dot(1.0 - chosen, self._flops[:k])) if k else 0.0
        remaining = float(self._flops[k:].sum())
        prev = self.chosen_actions[-1] if k else 1.0
        return build_state(self.scenario.layers[k], self.scenario, reduced, remaining, prev)

    reset = state

    def action_bounds(self, history: Sequence[float] | None = None) -> tuple[float, float]:
        history = self.chosen_actions if history is None else list(history)
        k = len(history)
        if k >= self.scenario.n_layers:
            raise ProtocolError("no layers left to bound")
        budget = self.scenario.target_preservation * self._total
        spent = float(np.dot(history, self._flops[:k])) if k else 0.0
        reserve = self.a_min * float(self._flops[k + 1:].sum())
        if self._flops[k] <= 0:
            return self.a_min, 1.0
        hi = (budget - spent - reserve) / self._flops[k]
        if hi < self.a_min - BUDGET_TOL:
            raise InfeasibleScenarioError(
                f"layer {k}: history leaves no feasible action (max {hi:.6g} < a_min {self.a_min})", layer=k
            )
        hi = min(1.0, max(self.a_min, hi))
        return self.a_min, hi

    def step(self, raw_action: float) -> tuple[float, np.ndarray, bool]:
        if self.done:
            raise ProtocolError("step() called after the episode finished")
        if not np.isfinite(raw_action):
            raise InvalidArgumentError(f"non-finite action {raw_action}")
        lo, hi = self.action_bounds()
        applied = float(min(hi, max(lo, raw_action)))
        self.chosen_actions.append(applied)
        self.cursor += 1
        return applied, self.state(), self.done

    def evaluate(self) -> float:
        if not self.done:
            raise ProtocolError("episode not finished")
        acc = self.model.evaluate(self.chosen_actions)
        noise = getattr(self.model, "noise_std", 0.0)
        if noise > 0 and self.rng is not None:
            acc = float(min(1.0, max(0.0, acc + self.rng.normal(0.0, noise))))
        return acc


def action_bounds(session: EnvironmentSession, proposed_history: Sequence[float] | None = None) -> tuple[float, float]:
    return session.action_bounds(proposed_history)


def step(session: EnvironmentSession, raw_action: float) -> tuple[float, np.ndarray, bool]:
    return session.step(raw_action)


def rollout(scenario: ScenarioSpec, actions: Sequence[float], model=None) -> tuple[np.ndarray, np.ndarray, float]:
    """Replay fixed actions through a session; returns (states, applied actions, noiseless accuracy)."""
    session = EnvironmentSession(scenario, model)
    states, applied = [], []
    for a in actions:
        states.append(session.state())
        applied.append(session.step(float(a))[0])
    return np.array(states), np.array(applied), float(session.model.evaluate(applied))


def replay_trace(scenario: ScenarioSpec, actions: Sequence[float], model=None, trial_index: int = 0) -> EpisodeTrace:
    """Like :func:`rollout` but packaged as a trace, with the per-layer action ceilings."""
    session = EnvironmentSession(scenario, model)
    states, applied, uppers = [], [], []
    for a in actions:
        states.append(session.state())
        uppers.append(session.action_bounds()[1])
        applied.append(session.step(float(a))[0])
    return EpisodeTrace(
        scenario_id=scenario.scenario_id,
        states=np.array(states),
        actions=np.array(applied),
        accuracy=float(session.model.evaluate(applied)),
        trial_index=trial_index,
        upper_bounds=np.array(uppers),
    )


def grid_optimum(scenario: ScenarioSpec, model=None, grid: Sequence[float] | None = None) -> tuple[float, np.ndarray]:
    """Best budget-feasible policy on a discrete action grid.

    Depth-first enumeration with budget pruning; partial policies that cannot
    be completed at the smallest grid value are cut.
    """
    model = model if model is not None else make_model(scenario)
    grid = np.round(np.linspace(0.1, 1.0, 10), 12) if grid is None else np.asarray(sorted(grid), dtype=float)
    flops = scenario.flops
    budget = scenario.target_preservation * flops.sum() + BUDGET_TOL * flops.sum()
    suffix_min = np.concatenate([np.cumsum((grid[0] * flops)[::-1])[::-1], [0.0]])
    n = scenario.n_layers
    best = (-np.inf, None)
    policy = np.empty(n)

    def visit(k, spent):
        nonlocal best
        if k == n:
            acc = model.evaluate(policy)
            if acc > best[0]:
                best = (acc, policy.copy())
            return
        for g in grid:
            cost = spent + g * flops[k]
            if cost + suffix_min[k + 1] > budget:
                break
            policy[k] = g
            visit(k + 1, cost)

    visit(0, 0.0)
    if best[1] is None:
        raise InfeasibleScenarioError("no grid policy satisfies the budget", layer=0)
    return float(best[0]), best[1]

