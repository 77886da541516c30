"""Robust predictive control barrier functions.

Offline design of an error tube and a terminal barrier, the two-step and
multiobjective online controllers, and a closed-loop simulation harness.
"""

from .controller import ControllerState, controller_step, step_multiobjective, step_two_step
from .dynamics import DisturbanceBox, SystemModel, bicycle_model, cwh_model, integrator_model
from .geometry import Ellipsoid, PaddingSchedule, Polytope, tighten
from .pcbf import (
    InvariantViolation,
    ObjectiveSpec,
    PcbfSpec,
    SlackSequence,
    htilde,
    solve_multiobjective,
    solve_objective,
    solve_slack_min,
    warmstart_shift,
)
from .synthesis import RpiTube, SynthesisError, TerminalCbf, synth_rpi, synth_terminal_cbf

__version__ = "0.1.0"

__all__ = [
    "ControllerState", "controller_step", "step_multiobjective", "step_two_step",
    "DisturbanceBox", "SystemModel", "bicycle_model", "cwh_model", "integrator_model",
    "Ellipsoid", "PaddingSchedule", "Polytope", "tighten",
    "InvariantViolation", "ObjectiveSpec", "PcbfSpec", "SlackSequence", "htilde",
    "solve_multiobjective", "solve_objective", "solve_slack_min", "warmstart_shift",
    "RpiTube", "SynthesisError", "TerminalCbf", "synth_rpi", "synth_terminal_cbf",
]
