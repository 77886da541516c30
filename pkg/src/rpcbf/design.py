"""From a config to a design bundle, a PCBF problem and scenarios."""

from __future__ import annotations

import logging

import numpy as np

from .config import ConfigError, DesignBundle, ExperimentConfig, design_hash
from .geometry import Ellipsoid, tighten
from .pcbf import ObjectiveSpec, PcbfSpec
from .sim import ScenarioConfig
from .synthesis import (
    RpiTube,
    TerminalCbf,
    _contraction_factor,
    compute_gamma_f,
    jacobian_vertices,
    synth_rpi,
    synth_terminal_cbf,
    verify_rpi,
    verify_sf_containment,
    verify_terminal,
    verify_tube_sampled,
)

logger = logging.getLogger(__name__)


def _vertices(cfg: ExperimentConfig, model, X, u_center):
    if model.is_linear:
        return None
    lo, hi = X.box_bounds()
    return jacobian_vertices(model, lo, hi, u_center,
                             int(cfg.synthesis["grid_points_per_axis"]))


def synthesize(cfg: ExperimentConfig, horizon: int, *, verify_samples: int = 20_000,
               seed: int = 0) -> DesignBundle:
    """Run (or load, for fixed designs) the tube and terminal designs and
    the sampled checks; raises SynthesisError when a design is infeasible."""
    model = cfg.build_model()
    X, U, W = cfg.build_sets()
    syn = cfg.synthesis
    center, u_center = cfg.center()
    pad = cfg.padding(horizon)
    if syn["method"] == "fixed":
        tube = RpiTube(Ellipsoid(np.atleast_2d(syn["rpi_shape"])),
                       np.atleast_2d(syn["rpi_gain"]), 0.0)
    else:
        step = float(syn["lambda_step"])
        lambdas = np.arange(step, 1.0 - 1e-12, step)
        tube = synth_rpi(getattr(model, "A", None), getattr(model, "B", None), W, X, U,
                         lambdas=lambdas, disturbance_matrix=model.disturbance_matrix,
                         vertices=_vertices(cfg, model, X, u_center),
                         center=center, u_center=u_center)
    X_tight = tighten(X, tube.E, pad.deltas[-1])
    U_tight = tighten(U, tube.input_set)
    A0, B0 = model.jacobians(np.zeros(model.n_x) if center is None else center,
                             np.zeros(model.n_u) if u_center is None else u_center)
    if syn["method"] == "fixed":
        P = np.atleast_2d(syn["terminal_p"])
        K = np.atleast_2d(syn["terminal_gain"])
        rho = _contraction_factor(A0 + B0 @ K, P)
        cbf = TerminalCbf(P, 0.0, K, rho, center, u_center)
        gamma = syn["gamma_f"]
        cbf = cbf.with_gamma(float(gamma) if gamma is not None
                             else compute_gamma_f(cbf, X_tight, U_tight))
    else:
        cbf = synth_terminal_cbf(A0, B0, X_tight, U_tight,
                                 vertices=_vertices(cfg, model, X, u_center),
                                 center=center, u_center=u_center,
                                 contraction=float(syn["terminal_contraction"]),
                                 gamma_floor=float(syn["gamma_floor"]),
                                 rescale=float(syn["terminal_rescale"]))
    report = _report(cfg, model, tube, cbf, X, U, W, X_tight, U_tight, verify_samples, seed)
    return DesignBundle(tube, cbf, horizon, model.digest(), design_hash(cfg, horizon), report)


def _report(cfg, model, tube, cbf, X, U, W, X_tight, U_tight, n, seed) -> dict:
    rep = {
        "state_tightening": [float(tube.E.support(a)) for a in X.A],
        "input_tightening": [float(tube.input_set.support(a)) for a in U.A],
        "lambda": float(tube.contraction),
        "gamma_f": float(cbf.gamma_f),
        "rho": float(cbf.rho),
        "sf_contained": verify_sf_containment(cbf, X_tight),
    }
    term = verify_terminal(cbf, model, U_tight, n_samples=n, seed=seed)
    rep["terminal_samples"] = n
    rep["terminal_violations"] = term.violations
    rep["terminal_worst_decrease"] = float(term.worst_decrease)
    if model.is_linear:
        ok, tot = verify_rpi(tube, model.A, model.B, W, n_initial=20, n_steps=max(1, n // 20),
                             seed=seed, disturbance_matrix=model.disturbance_matrix)
    else:
        ok, tot = verify_tube_sampled(tube, model, tighten(X, tube.E), U_tight, W,
                                      n_samples=n, seed=seed)
    rep["tube_samples"] = tot
    rep["tube_contained"] = ok
    return rep


def report_text(cfg: ExperimentConfig, bundle: DesignBundle) -> str:
    r = bundle.report
    lines = [f"design report: {cfg.scenario}",
             f"config hash {bundle.config_hash}, model hash {bundle.model_hash}",
             f"horizon {bundle.horizon}",
             f"tube contraction lambda = {r['lambda']:.2f}",
             "state tightening per row: " + ", ".join(f"{v:.6g}" for v in r["state_tightening"]),
             "input tightening per row: " + ", ".join(f"{v:.6g}" for v in r["input_tightening"]),
             f"gamma_f = {r['gamma_f']:.6g}, rho = {r['rho']:.6g}",
             f"terminal set inside tightened constraints: {r['sf_contained']}",
             f"terminal check: {r['terminal_violations']} violations "
             f"in {r['terminal_samples']} samples",
             f"tube check: {r['tube_contained']}/{r['tube_samples']} errors contained"]
    return "\n".join(lines) + "\n"


def build_spec(cfg: ExperimentConfig, bundle: DesignBundle, *, nominal: bool = False) -> PcbfSpec:
    model = cfg.build_model()
    bundle.check(cfg, model)
    X, U, _ = cfg.build_sets()
    N = bundle.horizon
    spec = PcbfSpec(model, N, X, U, bundle.tube, bundle.cbf, cfg.padding(N),
                    float(cfg.controller["alpha_f"]))
    return spec.as_nominal() if nominal else spec


def objective_spec(cfg: ExperimentConfig) -> ObjectiveSpec:
    o = cfg.objective
    arr = lambda v: None if v is None else np.asarray(v, dtype=float)  # noqa: E731
    if o["kind"] == "quadratic-tracking" and (o["Q"] is None or o["R"] is None):
        raise ConfigError("objective.Q", "quadratic-tracking needs Q and R")
    return ObjectiveSpec(o["kind"], arr(o["Q"]), arr(o["R"]), arr(o["z_ref"]))


def build_scenario(cfg: ExperimentConfig, bundle: DesignBundle, *, mode: str | None = None,
                   c_alpha: float | None = None, seed: int | None = None,
                   policy: str | None = None, steps: int | None = None,
                   spec: PcbfSpec | None = None) -> ScenarioConfig:
    mode = cfg.controller["mode"] if mode is None else mode
    if mode == "multi":
        mode = "multiobjective"
    c_alpha = float(cfg.controller["c_alpha"] if c_alpha is None else c_alpha)
    spec = build_spec(cfg, bundle) if spec is None else spec
    _, _, W = cfg.build_sets()
    sim = cfg.simulation
    gain = sim["human_gain"]
    center, _ = cfg.center()
    return ScenarioConfig(
        name=cfg.scenario, spec=spec, W=W, mode=mode, c_alpha=c_alpha,
        T=int(sim["steps"] if steps is None else steps), x0=np.asarray(sim["x0"], dtype=float),
        objective=objective_spec(cfg),
        policy=sim["disturbance_policy"] if policy is None else policy,
        seed=int(sim["seed"] if seed is None else seed),
        human_gain=None if gain is None else np.asarray(gain, dtype=float),
        human_ref=center,
        meta={"config_hash": cfg.config_hash, "design_hash": bundle.config_hash},
    )
