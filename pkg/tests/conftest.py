import numpy as np
import pytest

from histprune.core import LayerDescriptor, ScenarioSpec


def make_scenario(flops_shapes=None, p=0.5, kinds=None, env=None, scenario_id="t", environment_kind="synthetic"):
    """Small scenario from (in, out) channel pairs with 3x3 kernels on 8x8 maps."""
    shapes = flops_shapes or [(4, 4), (4, 4)]
    kinds = kinds or ["standard"] * len(shapes)
    layers = tuple(LayerDescriptor(i, k, cin, cout) for i, ((cin, cout), k) in enumerate(zip(shapes, kinds)))
    return ScenarioSpec(scenario_id, layers, p, "test", environment_kind, env or {})


def equal_cost(n, p, kinds=None, importance=None, **env):
    env = {"layer_importance": importance or [0.1] * n, **env}
    return make_scenario([(4, 4)] * n, p, kinds, env)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def constant_record(scenario, c, record_id, seed=0, traces=(), invariant=False):
    """Library record whose actor outputs ``c`` for every state (zero weights, logit bias)."""
    from histprune.agent import AgentConfig, DdpgAgent
    from histprune.transfer import HistoricalRecord

    agent = DdpgAgent(AgentConfig(invariant_mode=invariant), np.random.default_rng(seed))
    for w in agent.actor.weights:
        w[:] = 0.0
    for b in agent.actor.biases:
        b[:] = 0.0
    agent.actor.biases[-1][:] = np.log(c / (1 - c))
    return HistoricalRecord.from_agent(agent, scenario, traces, record_id=record_id, created_at="2026-01-01T00:00:00+00:00")
