"""Online controllers: the two-step robust PCBF, the multiobjective PCBF
and the nominal (tube-free) variant."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .pcbf import (
    InvariantViolation,
    ObjectiveSpec,
    PcbfSolution,
    PcbfSpec,
    WarmstartState,
    bound_tolerance,
    decrease,
    htilde,
    multiobjective_bound,
    solve_multiobjective,
    solve_objective,
    solve_slack_min,
    warmstart_shift,
)

logger = logging.getLogger(__name__)

MODES = ("two_step", "multiobjective", "nominal")


@dataclass
class ControllerState:
    mode: str
    c_alpha: float = 0.0
    ws: WarmstartState | None = None
    last_solution: PcbfSolution | None = None
    step_index: int = 0

    def __post_init__(self):
        if self.mode == "multi":
            self.mode = "multiobjective"
        if self.mode not in MODES:
            raise ValueError(f"unknown controller mode {self.mode!r}")
        if not 0.0 <= self.c_alpha < 1.0:
            raise ValueError("c_alpha must lie in [0, 1)")


@dataclass
class StepDiagnostics:
    """Per-step record: ``h`` is h(x_k) (two-step) or h~(xi*_k)
    (multiobjective); ``bound`` is the value h was certified against;
    ``dh`` is the decrease granted by the next warmstart."""

    k: int
    h: float
    bound: float
    dh: float
    objective: float
    iterations: int
    solve_ms: float
    wall_ms: float
    in_domain: bool
    tube_ok: bool
    input_ok: bool
    status: str = "optimal"


def _apply(spec: PcbfSpec, sol: PcbfSolution, x) -> np.ndarray:
    return sol.v[0] + spec.error_gain @ (np.asarray(x) - sol.z[0])


def _check_step(spec: PcbfSpec, sol, x, u):
    tube_ok = spec.in_tube(x, sol.z[0])
    if not tube_ok:
        raise InvariantViolation("measured state left the tube around the nominal state")
    input_ok = spec.U.contains(u, 1e-6 * (1.0 + np.abs(spec.U.b).max()))
    if not input_ok:
        raise InvariantViolation(f"applied input {u} violates the input constraints")
    return tube_ok, input_ok


def _domain(spec: PcbfSpec, h: float, k: int) -> bool:
    ok = h <= spec.alpha_f * spec.cbf.gamma_f
    if not ok and k == 0:
        logger.warning("initial state outside the certified domain (h=%.4g > %.4g)",
                       h, spec.alpha_f * spec.cbf.gamma_f)
    return ok


def step_two_step(spec: PcbfSpec, state: ControllerState, x, p=None,
                  cost: ObjectiveSpec = ObjectiveSpec("fuel")):
    """Slack minimisation followed by objective minimisation at fixed
    slacks; returns (u, diagnostics)."""
    if state.mode == "nominal" and not spec.nominal:
        spec = spec.as_nominal()
    t0 = time.perf_counter()
    init = None if state.ws is None else (state.ws.z_warm[0], state.ws.v_warm)
    sol_h = solve_slack_min(spec, x, init=init)
    h = sol_h.h_value
    sol = solve_objective(spec, x, sol_h.xi, cost, p, init=sol_h)
    wall = time.perf_counter() - t0
    u = _apply(spec, sol, x)
    tube_ok, input_ok = _check_step(spec, sol, x, u)
    bound = h if state.ws is None else htilde(state.ws.xi_warm, spec.alpha_f)
    ws = warmstart_shift(spec, sol)
    dh = decrease(sol.xi, ws.xi_warm, spec.alpha_f)
    diag = StepDiagnostics(state.step_index, h, bound, dh, sol.objective,
                           sol_h.iterations + sol.iterations,
                           1e3 * (sol_h.solve_time + sol.solve_time), 1e3 * wall,
                           _domain(spec, h, state.step_index), tube_ok, input_ok,
                           "fallback" if sol.status == "fallback" else sol_h.status)
    state.ws, state.last_solution = ws, sol
    state.step_index += 1
    return u, diag


def init_multiobjective(spec: PcbfSpec, state: ControllerState, x0) -> ControllerState:
    """Seed the warmstart with the slack-minimising solution at x0, so the
    first decrease term is zero."""
    sol = solve_slack_min(spec, x0)
    state.ws = WarmstartState(sol.xi, sol.xi, sol.v.copy(), sol.z.copy())
    state.last_solution = None
    state.step_index = 0
    return state


def step_multiobjective(spec: PcbfSpec, state: ControllerState, x, p=None,
                        cost: ObjectiveSpec = ObjectiveSpec("fuel")):
    """One solve of the bounded multiobjective problem; returns
    (u, diagnostics) and advances the warmstart."""
    t0 = time.perf_counter()
    if state.ws is None:
        init_multiobjective(spec, state, x)
    bound = multiobjective_bound(state.ws, state.c_alpha, spec.alpha_f)
    slack = bound_tolerance(spec, bound)
    sol = solve_multiobjective(spec, x, state.ws, state.c_alpha, cost, p)
    wall = time.perf_counter() - t0
    if sol.h_value > bound + slack:
        raise InvariantViolation(f"barrier value {sol.h_value:.6g} exceeds its bound {bound:.6g}")
    u = _apply(spec, sol, x)
    tube_ok, input_ok = _check_step(spec, sol, x, u)
    ws = warmstart_shift(spec, sol)
    dh = decrease(sol.xi, ws.xi_warm, spec.alpha_f)
    diag = StepDiagnostics(state.step_index, sol.h_value, bound, dh, sol.objective,
                           sol.iterations, 1e3 * sol.solve_time, 1e3 * wall,
                           _domain(spec, sol.h_value, state.step_index), tube_ok, input_ok,
                           sol.status)
    state.ws, state.last_solution = ws, sol
    state.step_index += 1
    return u, diag


def controller_step(spec: PcbfSpec, state: ControllerState, x, p=None,
                    cost: ObjectiveSpec = ObjectiveSpec("fuel")):
    if state.mode == "multiobjective":
        return step_multiobjective(spec, state, x, p, cost)
    return step_two_step(spec, state, x, p, cost)
