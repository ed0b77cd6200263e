import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histprune.core import STATE_DIM, LayerDescriptor, ScenarioSpec
from histprune.env import (
    EnvironmentSession,
    LinearReconModel,
    ReconLayer,
    SyntheticNetModel,
    channel_select,
    check_feasible,
    evaluate_synthetic,
    grid_optimum,
    replay_trace,
    rollout,
)
from histprune.errors import InfeasibleScenarioError, ProtocolError, ShapeError

from conftest import equal_cost, make_scenario
from oracles import best_subset_error, brute_force_grid, synthetic_accuracy


def test_bounds_without_budget_pressure():
    assert EnvironmentSession(equal_cost(2, 1.0)).action_bounds() == (0.1, 1.0)


def test_bounds_suppression_after_greedy_first_layer():
    s = EnvironmentSession(equal_cost(2, 0.55))
    lo, hi = s.action_bounds([1.0])
    assert lo == 0.1 and abs(hi - (2 * 0.55 - 1.0)) < 1e-12
    a0 = 0.7
    assert abs(s.action_bounds([a0])[1] - (2 * 0.55 - a0)) < 1e-12
    applied, _, _ = s.step(1.0)
    assert applied == 1.0
    applied, nxt, done = s.step(1.0)
    assert abs(applied - 0.1) < 1e-12 and done and not nxt.any() and nxt.shape == (STATE_DIM,)


def test_single_layer_bounds_equal_budget():
    lo, hi = EnvironmentSession(equal_cost(1, 0.4)).action_bounds()
    assert lo == 0.1 and abs(hi - 0.4) < 1e-12


def test_step_protocol():
    s = EnvironmentSession(equal_cost(2, 1.0))
    assert s.step(0.6)[0] == 0.6 and s.cursor == 1 and s.chosen_actions == [0.6]
    with pytest.raises(ProtocolError):
        s.evaluate()
    s.step(0.9)
    with pytest.raises(ProtocolError):
        s.step(0.5)
    with pytest.raises(ProtocolError):
        s.action_bounds()


def test_infeasible_scenario_names_layer():
    with pytest.raises(InfeasibleScenarioError) as exc:
        check_feasible(equal_cost(3, 0.05))
    assert exc.value.layer == 1  # 0.1 + 0.1 > 0.15
    with pytest.raises(InfeasibleScenarioError):
        EnvironmentSession(equal_cost(3, 0.05))


@given(
    costs=st.lists(st.floats(1.0, 100.0), min_size=1, max_size=6),
    p=st.floats(0.15, 1.0),
    raw=st.lists(st.floats(0.01, 1.0), min_size=6, max_size=6),
)
@settings(max_examples=100, deadline=None)
def test_budget_safety(costs, p, raw):
    layers = tuple(LayerDescriptor(i, "shortcut", 1, 1, flops=c, critical=False) for i, c in enumerate(costs))
    sc = ScenarioSpec("b", layers, p)
    s = EnvironmentSession(sc)
    for a in raw[: len(costs)]:
        applied, _, _ = s.step(a)
        assert 0.1 <= applied <= 1.0
    total = float(np.dot(s.chosen_actions, costs))
    assert total <= p * sum(costs) + 1e-6


def test_synthetic_examples():
    m = SyntheticNetModel(0.9, (0.5,), (False,), 0.0, 2.0)
    assert evaluate_synthetic(m, [1.0]) == 0.9
    assert abs(evaluate_synthetic(m, [0.5]) - 0.775) < 1e-12
    assert abs(evaluate_synthetic(m, [0.5]) - synthetic_accuracy(0.9, [0.5], [False], 0, 2, [0.5])) < 1e-12
    with pytest.raises(ShapeError):
        evaluate_synthetic(m, [0.5, 0.5])


@given(
    w=st.lists(st.floats(0, 1), min_size=3, max_size=3),
    crit=st.lists(st.booleans(), min_size=3, max_size=3),
    a=st.lists(st.floats(0.1, 1.0), min_size=3, max_size=3),
    k=st.integers(0, 2), bump=st.floats(0, 0.9),
)
def test_synthetic_monotone(w, crit, a, k, bump):
    m = SyntheticNetModel(0.95, tuple(w), tuple(crit), 0.05, 2.0)
    raised = list(a)
    raised[k] = min(1.0, raised[k] + bump)
    assert evaluate_synthetic(m, raised) >= evaluate_synthetic(m, a)
    ref = synthetic_accuracy(0.95, w, crit, 0.05, 2.0, a)
    assert abs(evaluate_synthetic(m, a) - ref) < 1e-12


@pytest.mark.parametrize("n,p", [(2, 0.5), (3, 0.4), (4, 0.6)])
def test_grid_optimum_matches_brute_force(n, p):
    rng = np.random.default_rng(n)
    shapes = [(int(c), 4) for c in rng.integers(2, 9, size=n)]
    env = {"layer_importance": list(rng.uniform(0.05, 0.3, size=n)), "criticality_penalty": 0.05}
    sc = make_scenario(shapes, p, ["standard", "shortcut", "standard", "standard"][:n], env)
    model = SyntheticNetModel.from_scenario(sc)
    grid = np.round(np.linspace(0.1, 1.0, 10), 12)
    best, policy = grid_optimum(sc, model, grid)
    ref, _ = brute_force_grid(sc.flops, p, model.evaluate, grid)
    assert abs(best - ref) < 1e-12
    assert float(np.dot(policy, sc.flops)) <= p * sc.total_flops * (1 + 1e-9)


def test_channel_select_full_keep_is_exact():
    rng = np.random.default_rng(0)
    w, x = rng.normal(size=(3, 4)), rng.normal(size=(20, 4))
    sel = channel_select(w, x, 4)
    assert sel.kept_indices == (0, 1, 2, 3) and sel.reconstruction_error < 1e-20


def test_channel_select_drops_zero_column():
    rng = np.random.default_rng(1)
    w, x = rng.normal(size=(3, 5)), rng.normal(size=(30, 5))
    w[:, 2] = 0.0
    sel = channel_select(w, x, 4)
    assert sel.kept_indices == (0, 1, 3, 4) and sel.reconstruction_error < 1e-18


@pytest.mark.parametrize("seed", range(8))
def test_channel_select_near_best_subset(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(3, 4))
    x = rng.normal(size=(24, 4)) * rng.uniform(0.2, 2.0, size=4)
    sel = channel_select(w, x, 2)
    best = best_subset_error(w, x, 2)
    assert sel.reconstruction_error <= best * 1.05 + 1e-12


def test_recon_all_ones_and_irrelevant_channels():
    sc = make_scenario([(6, 4), (5, 3)], 0.6, environment_kind="linear-recon", env={"seed": 3})
    m = LinearReconModel.from_scenario(sc)
    assert m.evaluate([1.0, 1.0]) == 1.0
    rng = np.random.default_rng(4)
    w, x = rng.normal(size=(3, 4)), rng.normal(size=(16, 4))
    w[:, 3] = 0.0
    assert LinearReconModel((ReconLayer(w, x),)).evaluate([0.75]) == pytest.approx(1.0, abs=1e-15)


def test_recon_frozen_two_layer_fixture():
    sc = make_scenario([(6, 4), (5, 3)], 0.6, environment_kind="linear-recon", env={"seed": 7, "n_samples": 32})
    m = LinearReconModel.from_scenario(sc)
    acc = m.evaluate([0.5, 0.6])
    assert abs(acc - 0.8847720287025936) < 1e-9
    # independent pipeline: least-squares residual on the selected channels over total energy
    err = energy = 0.0
    for k, (layer, keep) in enumerate(zip(m.layers, (3, 3))):
        kept = list(m.select(k, keep).kept_indices)
        y = layer.inputs @ layer.weight.T
        coef = np.linalg.lstsq(layer.inputs[:, kept], y, rcond=None)[0]
        err += float(np.sum((y - layer.inputs[:, kept] @ coef) ** 2))
        energy += float(np.sum(y**2))
    assert abs(acc - (1 - err / energy)) < 1e-9


def test_rollout_and_replay_agree():
    sc = equal_cost(3, 0.5)
    states, applied, acc = rollout(sc, [1.0, 1.0, 1.0])
    tr = replay_trace(sc, [1.0, 1.0, 1.0], trial_index=4)
    assert np.array_equal(states, tr.states) and np.array_equal(applied, tr.actions)
    assert acc == tr.accuracy and tr.trial_index == 4
    assert float(np.dot(applied, sc.flops)) <= 0.5 * sc.total_flops + 1e-6
    assert tr.upper_bounds[0] == 1.0 and np.all(tr.actions <= tr.upper_bounds + 1e-12)


def test_noise_is_optional_and_seeded():
    sc = equal_cost(2, 1.0, noise_std=0.05)
    vals = []
    for _ in range(2):
        s = EnvironmentSession(sc, rng=np.random.default_rng(5))
        s.step(0.5), s.step(0.5)
        vals.append(s.evaluate())
    assert vals[0] == vals[1]
    quiet = EnvironmentSession(sc)
    quiet.step(0.5), quiet.step(0.5)
    assert quiet.evaluate() == SyntheticNetModel.from_scenario(sc).evaluate([0.5, 0.5])
