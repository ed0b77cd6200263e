"""Built-in reference scenarios for experiments, tests and the CLI examples."""

from __future__ import annotations

from typing import Sequence

from .core import LayerDescriptor, ScenarioSpec

# (kind, in, out, kernel, stride, height, width)
_RESNET_LIKE_8 = [
    ("standard", 16, 16, 3, 1, 32, 32),
    ("standard", 16, 16, 3, 1, 32, 32),
    ("standard", 16, 32, 3, 2, 32, 32),
    ("block-top", 32, 32, 3, 1, 16, 16),
    ("standard", 32, 64, 3, 2, 16, 16),
    ("standard", 64, 64, 3, 1, 8, 8),
    ("shortcut", 64, 64, 1, 1, 8, 8),
    ("standard", 64, 64, 3, 1, 8, 8),
]
_IMPORTANCE_8 = [0.30, 0.10, 0.22, 0.15, 0.08, 0.06, 0.12, 0.04]

_SMALL_4 = [
    ("standard", 8, 16, 3, 1, 16, 16),
    ("standard", 16, 16, 3, 1, 16, 16),
    ("standard", 16, 32, 3, 2, 16, 16),
    ("standard", 32, 32, 3, 1, 8, 8),
]


def build_layers(shapes: Sequence[tuple]) -> tuple[LayerDescriptor, ...]:
    return tuple(
        LayerDescriptor(i, kind, cin, cout, k, s, h, w)
        for i, (kind, cin, cout, k, s, h, w) in enumerate(shapes)
    )


def synthetic_scenario(
    scenario_id: str,
    shapes: Sequence[tuple],
    importance: Sequence[float],
    p: float,
    base_accuracy: float = 0.9,
    criticality_penalty: float = 0.0,
    curvature: float = 2.0,
    noise_std: float = 0.0,
    dataset_tag: str = "synthetic",
) -> ScenarioSpec:
    return ScenarioSpec(
        scenario_id=scenario_id,
        layers=build_layers(shapes),
        target_preservation=p,
        dataset_tag=dataset_tag,
        environment_kind="synthetic",
        environment={
            "base_accuracy": base_accuracy,
            "layer_importance": list(importance),
            "criticality_penalty": criticality_penalty,
            "curvature": curvature,
            "noise_std": noise_std,
        },
    )


def reference_8layer(p: float = 0.5, noise_std: float = 0.0) -> ScenarioSpec:
    """ResNet-like 8-layer network with one block-top and one shortcut layer."""
    return synthetic_scenario(
        f"ref8-p{p:g}", _RESNET_LIKE_8, _IMPORTANCE_8, p,
        base_accuracy=0.92, criticality_penalty=0.1, noise_std=noise_std,
    )


FOUR_LAYER_IMPORTANCE = (
    (0.40, 0.20, 0.10, 0.05),
    (0.05, 0.10, 0.30, 0.40),
    (0.25, 0.05, 0.25, 0.10),
)


def reference_4layer(variant: int = 0, p: float = 0.5) -> ScenarioSpec:
    return synthetic_scenario(
        f"ref4-v{variant}-p{p:g}", _SMALL_4, FOUR_LAYER_IMPORTANCE[variant], p, base_accuracy=0.9
    )


def reference_recon(p: float = 0.5, seed: int = 0) -> ScenarioSpec:
    """Small linear-reconstruction network (few channels so lasso selection is cheap)."""
    shapes = [
        ("standard", 8, 8, 3, 1, 8, 8),
        ("standard", 8, 12, 3, 1, 8, 8),
        ("standard", 12, 12, 3, 2, 8, 8),
        ("standard", 12, 16, 3, 1, 4, 4),
    ]
    return ScenarioSpec(
        scenario_id=f"recon4-p{p:g}",
        layers=build_layers(shapes),
        target_preservation=p,
        dataset_tag="calibration",
        environment_kind="linear-recon",
        environment={"seed": seed, "n_samples": 64, "l1_strength": 0.0},
    )


REFERENCE_SCENARIOS = {
    "ref8": reference_8layer,
    "ref4": reference_4layer,
    "recon4": reference_recon,
}
