import numpy as np
import pytest

import oracles
from rpcbf.controller import ControllerState, init_multiobjective
from rpcbf.pcbf import (
    ObjectiveSpec,
    PcbfSolution,
    SlackSequence,
    decrease,
    decrease_expanded,
    htilde,
    multiobjective_bound,
    solve_multiobjective,
    solve_objective,
    solve_slack_min,
    warmstart_shift,
)

FUEL = ObjectiveSpec("fuel")


def rel_err(a, b):
    return abs(a - b) / max(1.0, abs(b))


def test_slack_min_worked_example(toy):
    _, _, spec = toy
    sol = solve_slack_min(spec, [2.0])
    assert sol.h_value == pytest.approx(1.101, abs=1e-6)
    assert sol.xi.terminal == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(sol.xi.stage, [[1.0, 0.0], [0.101, 0.0]], atol=1e-6)


def test_slack_min_zero_inside_safe_set(toy):
    _, _, spec = toy
    for x in (-0.8, 0.0, 0.5, 0.85):
        assert solve_slack_min(spec, [x]).h_value <= 1e-7


def test_objective_example(toy):
    _, _, spec = toy
    sol_h = solve_slack_min(spec, [2.0])
    sol = solve_objective(spec, [2.0], sol_h.xi, FUEL, init=sol_h)
    assert sol.objective == pytest.approx(1.4, abs=1e-6)
    u = sol.v[0] + spec.error_gain @ (np.array([2.0]) - sol.z[0])
    assert u[0] == pytest.approx(-1.0, abs=1e-6)


def test_warmstart_example(toy):
    _, _, spec = toy
    sol_h = solve_slack_min(spec, [2.0])
    sol = solve_objective(spec, [2.0], sol_h.xi, FUEL, init=sol_h)
    ws = warmstart_shift(spec, sol)
    assert ws.xi_warm.stage[:, 0] == pytest.approx([0.1, 0.0], abs=1e-6)
    assert ws.xi_warm.terminal == pytest.approx(0.0, abs=1e-9)
    d = decrease(sol.xi, ws.xi_warm, spec.alpha_f)
    assert d == pytest.approx(1.001, abs=1e-6)
    assert decrease_expanded(sol.xi, ws.xi_warm, spec.alpha_f) == pytest.approx(d, abs=1e-9)
    bound = multiobjective_bound(ws, 0.5, spec.alpha_f)
    assert bound == pytest.approx(0.6005, abs=1e-6)


def test_init_multiobjective_idempotent(toy):
    _, _, spec = toy
    a = init_multiobjective(spec, ControllerState("multi"), [2.0]).ws
    b = init_multiobjective(spec, ControllerState("multi"), [2.0]).ws
    np.testing.assert_array_equal(a.xi_warm.stage, b.xi_warm.stage)
    np.testing.assert_array_equal(a.v_warm, b.v_warm)
    assert htilde(a.xi_warm, spec.alpha_f) == pytest.approx(1.101, abs=1e-6)
    inside = init_multiobjective(spec, ControllerState("multi"), [0.3]).ws
    assert inside.xi_warm.is_zero(1e-9)


def test_decrease_expanded_matches_random():
    rng = np.random.default_rng(3)
    for _ in range(20):
        N, r = rng.integers(1, 6), rng.integers(1, 4)
        a = SlackSequence(rng.uniform(0, 1, (N, r)), rng.uniform(0, 1))
        b = SlackSequence(rng.uniform(0, 1, (N, r)), rng.uniform(0, 1))
        # the expanded form only coincides with the plain difference when
        # the warmstart is the shift of the previous slacks
        b = SlackSequence(np.vstack([a.stage[1:], b.stage[-1:]]), b.terminal)
        lhs = decrease(a, b, 1e6)
        assert decrease_expanded(a, b, 1e6) == pytest.approx(lhs, rel=1e-12, abs=1e-6)


def test_slack_sequence_rejects_negative():
    with pytest.raises(ValueError):
        SlackSequence(np.array([[-1.0]]), 0.0)


def test_multiobjective_rejects_bad_c_alpha(toy):
    _, _, spec = toy
    ws = init_multiobjective(spec, ControllerState("multi"), [2.0]).ws
    with pytest.raises(ValueError):
        solve_multiobjective(spec, [2.0], ws, 1.0, FUEL)


def test_mode_equivalence_barrier_objective(toy):
    """c_alpha = 0 with J equal to the barrier reproduces the slack minimum."""
    _, _, spec = toy
    rng = np.random.default_rng(11)
    for x in rng.uniform(-3, 3, 10):
        ws = init_multiobjective(spec, ControllerState("multi"), [x]).ws
        h = solve_slack_min(spec, [x]).h_value
        sol = solve_multiobjective(spec, [x], ws, 0.0, ObjectiveSpec("barrier"))
        assert sol.h_value == pytest.approx(h, abs=1e-6 * (1 + h))


def test_solution_dataclass_defaults():
    s = PcbfSolution(np.zeros((2, 1)), np.zeros((1, 1)), SlackSequence.zeros(1, 2), 0.0, 0.0)
    assert s.status == "optimal" and s.iterations == 1


@pytest.fixture(scope="module")
def random_states():
    return np.random.default_rng(2024).uniform(-3.0, 3.0, 50)


def _stage_flat(xi):
    return xi.stage.ravel()  # rows are (+z, -z) per stage, matching the oracle


def test_oracle_slack_min(toy, random_states):
    _, _, spec = toy
    for x in random_states:
        h = solve_slack_min(spec, [x]).h_value
        assert rel_err(h, oracles.slack_min(x)) <= 1e-5, x


def test_oracle_objective(toy, random_states):
    _, _, spec = toy
    for x in random_states:
        sol_h = solve_slack_min(spec, [x])
        sol = solve_objective(spec, [x], sol_h.xi, FUEL, init=sol_h)
        ref = oracles.fixed_fuel(x, _stage_flat(sol_h.xi), sol_h.xi.terminal)
        assert rel_err(sol.objective, ref) <= 1e-5, x


@pytest.mark.parametrize("c_alpha", [0.0, 0.5, 0.9])
def test_oracle_multiobjective(toy, random_states, c_alpha):
    _, _, spec = toy
    rng = np.random.default_rng(5)
    for x in random_states:
        ws = init_multiobjective(spec, ControllerState("multi", c_alpha), [x]).ws
        bound = multiobjective_bound(ws, c_alpha, spec.alpha_f)
        sol = solve_multiobjective(spec, [x], ws, c_alpha, FUEL)
        assert rel_err(sol.objective, oracles.bounded_fuel(x, bound)) <= 1e-5, x
        # one step later, with a nonzero decrease in the bound
        ws1 = warmstart_shift(spec, sol)
        x1 = sol.z[1] + rng.uniform(-0.1, 0.1)
        bound1 = multiobjective_bound(ws1, c_alpha, spec.alpha_f)
        sol1 = solve_multiobjective(spec, x1, ws1, c_alpha, FUEL)
        assert rel_err(sol1.objective, oracles.bounded_fuel(x1[0], bound1)) <= 1e-5, x
