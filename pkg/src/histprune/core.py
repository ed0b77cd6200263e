"""Domain types, state featurization and learning-curve statistics.

States are plain ``numpy`` vectors of length :data:`STATE_DIM`; the feature
order is fixed by :data:`FEATURE_NAMES` so that actor weights trained on one
scenario are shape-compatible with every other scenario.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import InvalidArgumentError, InvalidScenarioError

FEATURE_NAMES = (
    "layer_index_norm",
    "kind_onehot_scalar",
    "in_channels_norm",
    "out_channels_norm",
    "kernel_norm",
    "stride_norm",
    "height_norm",
    "width_norm",
    "flops_reduced_so_far_norm",
    "flops_remaining_norm",
    "previous_action",
)
STATE_DIM = len(FEATURE_NAMES)

# Smallest preservation ratio any layer may receive.
A_MIN = 0.1


class LayerKind(str, Enum):
    STANDARD = "standard"
    SHORTCUT = "shortcut"
    BLOCK_TOP = "block-top"
    DEPTHWISE = "depthwise"


# Scalar encoding of the layer kind, spread evenly over [0, 1].
_KIND_CODE = {
    LayerKind.STANDARD: 0.0,
    LayerKind.SHORTCUT: 1.0 / 3.0,
    LayerKind.BLOCK_TOP: 2.0 / 3.0,
    LayerKind.DEPTHWISE: 1.0,
}


def conv_flops(in_channels, out_channels, kernel_size, stride, height, width, kind=LayerKind.STANDARD):
    """Multiply-accumulate count of a convolution over an ``height x width`` input."""
    fan = in_channels if LayerKind(kind) != LayerKind.DEPTHWISE else 1
    return float(out_channels * fan * kernel_size**2 * height * width) / stride**2


@dataclass(frozen=True)
class LayerDescriptor:
    index: int
    kind: LayerKind
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    feature_height: int = 8
    feature_width: int = 8
    flops: float | None = None
    critical: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.index < 0:
            raise InvalidScenarioError(f"layer index must be >= 0, got {self.index}")
        for name in ("in_channels", "out_channels", "kernel_size", "stride", "feature_height", "feature_width"):
            if int(getattr(self, name)) < 1:
                raise InvalidScenarioError(f"layer {self.index}: {name} must be >= 1")
        expected = conv_flops(
            self.in_channels, self.out_channels, self.kernel_size, self.stride,
            self.feature_height, self.feature_width, self.kind,
        )
        if self.flops is None:
            object.__setattr__(self, "flops", expected)
        else:
            if self.flops < 0:
                raise InvalidScenarioError(f"layer {self.index}: negative flops")
            if self.kind == LayerKind.STANDARD and not np.isclose(self.flops, expected, rtol=1e-9):
                raise InvalidScenarioError(
                    f"layer {self.index}: flops {self.flops} inconsistent with shape (expected {expected})"
                )
            object.__setattr__(self, "flops", float(self.flops))
        if self.critical is None:
            object.__setattr__(self, "critical", self.kind in (LayerKind.SHORTCUT, LayerKind.BLOCK_TOP))

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "kind": self.kind.value,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "feature_height": self.feature_height,
            "feature_width": self.feature_width,
            "flops": self.flops,
            "critical": self.critical,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LayerDescriptor":
        return cls(**data)


class EnvironmentKind(str, Enum):
    SYNTHETIC = "synthetic"
    LINEAR_RECON = "linear-recon"


@dataclass(frozen=True)
class ScenarioSpec:
    """A pruning task: layered network, target overall preservation and environment.

    ``environment`` carries the environment-kind specific parameters (see
    :mod:`histprune.env`) as a JSON-compatible mapping.
    """

    scenario_id: str
    layers: tuple[LayerDescriptor, ...]
    target_preservation: float
    dataset_tag: str = ""
    environment_kind: EnvironmentKind = EnvironmentKind.SYNTHETIC
    environment: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "environment_kind", EnvironmentKind(self.environment_kind))
        if not self.layers:
            raise InvalidScenarioError(f"scenario {self.scenario_id!r} has no layers")
        for i, layer in enumerate(self.layers):
            if layer.index != i:
                raise InvalidScenarioError(
                    f"scenario {self.scenario_id!r}: layer indices must be consecutive from 0 (position {i} has {layer.index})"
                )
        p = self.target_preservation
        if not (0.0 < p <= 1.0):
            raise InvalidScenarioError(f"target_preservation must lie in (0, 1], got {p}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @cached_property
    def flops(self) -> np.ndarray:
        out = np.array([layer.flops for layer in self.layers], dtype=float)
        out.setflags(write=False)
        return out

    @cached_property
    def total_flops(self) -> float:
        return float(self.flops.sum())

    @cached_property
    def scales(self) -> dict[str, float]:
        """Per-scenario normalization divisors used by :func:`build_state`."""
        out: dict[str, float] = {"n": len(self.layers), "total_flops": self.total_flops}
        for name in ("in_channels", "out_channels", "kernel_size", "stride", "feature_height", "feature_width"):
            out[name] = max(getattr(layer, name) for layer in self.layers)
        return out

    @cached_property
    def critical_mask(self) -> np.ndarray:
        out = np.array([bool(layer.critical) for layer in self.layers])
        out.setflags(write=False)
        return out

    def with_preservation(self, p: float, scenario_id: str | None = None) -> "ScenarioSpec":
        return ScenarioSpec(
            scenario_id=scenario_id or self.scenario_id,
            layers=self.layers,
            target_preservation=p,
            dataset_tag=self.dataset_tag,
            environment_kind=self.environment_kind,
            environment=dict(self.environment),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "layers": [layer.to_dict() for layer in self.layers],
            "target_preservation": self.target_preservation,
            "dataset_tag": self.dataset_tag,
            "environment_kind": self.environment_kind.value,
            "environment": self.environment,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScenarioSpec":
        try:
            layers = [LayerDescriptor.from_dict(layer) for layer in data["layers"]]
            return cls(
                scenario_id=str(data["scenario_id"]),
                layers=tuple(layers),
                target_preservation=float(data["target_preservation"]),
                dataset_tag=str(data.get("dataset_tag", "")),
                environment_kind=data.get("environment_kind", "synthetic"),
                environment=dict(data.get("environment", {})),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidScenarioError(f"malformed scenario document: {exc}") from exc


def load_scenario(path: str | Path) -> ScenarioSpec:
    """Load a :class:`ScenarioSpec` from a JSON file.

    The file may either be the scenario itself or an experiment config with
    a ``scenario`` key.
    """
    data = json.loads(Path(path).read_text())
    if "scenario" in data and "layers" not in data:
        data = data["scenario"]
    return ScenarioSpec.from_dict(data)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: float
    reward: float
    next_state: np.ndarray
    terminal: bool
    # largest feasible actions at state / next_state; policy actions are projected onto them
    upper: float = 1.0
    next_upper: float = 1.0
    # episode outcome and remaining steps, for return-to-go critic targets; NaN if unknown
    outcome: float = float("nan")
    steps_to_end: int = 0


@dataclass
class EpisodeTrace:
    scenario_id: str
    states: np.ndarray  # (n_layers, STATE_DIM)
    actions: np.ndarray  # (n_layers,)
    accuracy: float
    trial_index: int = 0
    upper_bounds: np.ndarray | None = None  # feasible action ceiling seen at each layer

    @property
    def per_layer(self) -> list[tuple[np.ndarray, float]]:
        return [(s, float(a)) for s, a in zip(self.states, self.actions)]

    def transitions(self) -> list[Transition]:
        """Unroll into one transition per layer; only the last carries reward."""
        n = len(self.actions)
        uppers = np.ones(n) if self.upper_bounds is None else self.upper_bounds
        out = []
        for k in range(n):
            terminal = k == n - 1
            nxt = np.zeros(STATE_DIM) if terminal else self.states[k + 1]
            out.append(
                Transition(
                    state=self.states[k],
                    action=float(self.actions[k]),
                    reward=float(self.accuracy) if terminal else 0.0,
                    next_state=nxt,
                    terminal=terminal,
                    upper=float(uppers[k]),
                    next_upper=1.0 if terminal else float(uppers[k + 1]),
                    outcome=float(self.accuracy),
                    steps_to_end=n - 1 - k,
                )
            )
        return out

    def realized_preservation(self, scenario: ScenarioSpec) -> float:
        return float(np.dot(self.actions, scenario.flops) / scenario.total_flops)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "accuracy": self.accuracy,
            "trial_index": self.trial_index,
            "upper_bounds": None if self.upper_bounds is None else self.upper_bounds.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EpisodeTrace":
        return cls(
            scenario_id=data["scenario_id"],
            states=np.asarray(data["states"], dtype=float).reshape(-1, STATE_DIM),
            actions=np.asarray(data["actions"], dtype=float),
            accuracy=float(data["accuracy"]),
            trial_index=int(data.get("trial_index", 0)),
            upper_bounds=None if data.get("upper_bounds") is None else np.asarray(data["upper_bounds"], dtype=float),
        )


@dataclass
class LearningCurve:
    rewards: list[float]
    smoothed_mean: list[float] | None = None
    smoothed_var: list[float] | None = None

    def __len__(self):
        return len(self.rewards)

    def smoothed(self, window: int = 21) -> "LearningCurve":
        means, variances = moving_stats(self.rewards, window)
        return LearningCurve(list(self.rewards), means, variances)

    def to_dict(self) -> dict[str, Any]:
        return {
            "rewards": list(self.rewards),
            "smoothed_mean": self.smoothed_mean,
            "smoothed_var": self.smoothed_var,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LearningCurve":
        return cls(list(data["rewards"]), data.get("smoothed_mean"), data.get("smoothed_var"))


def build_state(
    layer: LayerDescriptor,
    scenario: ScenarioSpec,
    reduced_flops: float,
    remaining_flops: float,
    prev_action: float,
) -> np.ndarray:
    """Featurize one layer of ``scenario`` into a vector in ``[0, 1]^STATE_DIM``.

    ``reduced_flops`` is the MAC count already removed by earlier layers and
    ``remaining_flops`` the MAC count still undecided (this layer and the ones
    after it); both are normalized by the scenario total.
    """
    if reduced_flops < 0 or remaining_flops < 0:
        raise InvalidArgumentError("flops counts must be non-negative")
    if not 0.0 <= prev_action <= 1.0:
        raise InvalidArgumentError(f"prev_action must lie in [0, 1], got {prev_action}")
    sc = scenario.scales
    if sc["total_flops"] <= 0:
        raise InvalidScenarioError(f"scenario {scenario.scenario_id!r} has zero total flops")
    state = np.array(
        [
            layer.index / max(sc["n"] - 1, 1),
            _KIND_CODE[layer.kind],
            layer.in_channels / sc["in_channels"],
            layer.out_channels / sc["out_channels"],
            layer.kernel_size / sc["kernel_size"],
            layer.stride / sc["stride"],
            layer.feature_height / sc["feature_height"],
            layer.feature_width / sc["feature_width"],
            reduced_flops / sc["total_flops"],
            remaining_flops / sc["total_flops"],
            prev_action,
        ]
    )
    return np.clip(state, 0.0, 1.0)


def ema_smooth(series: Sequence[float], weight: float = 0.5) -> list[float]:
    """Exponential moving average with ``y[0] = x[0]`` (TensorBoard convention)."""
    if not 0.0 < weight < 1.0:
        raise InvalidArgumentError(f"weight must lie in (0, 1), got {weight}")
    out: list[float] = []
    for x in series:
        out.append(float(x) if not out else weight * out[-1] + (1.0 - weight) * float(x))
    return out


def moving_stats(series: Sequence[float], window: int) -> tuple[list[float], list[float]]:
    """Centered moving mean and population variance with clipped edges."""
    if window < 1 or window % 2 == 0:
        raise InvalidArgumentError(f"window must be odd and >= 1, got {window}")
    x = np.asarray(series, dtype=float)
    half = window // 2
    n = len(x)
    means, variances = [], []
    for i in range(n):
        seg = x[max(0, i - half): min(n, i + half + 1)]
        # constant windows are reported exactly (summation can drift by an ulp)
        mu = seg[0] if np.all(seg == seg[0]) else seg.mean()
        means.append(float(mu))
        variances.append(float(np.mean((seg - mu) ** 2)))
    return means, variances
