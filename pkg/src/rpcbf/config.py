"""Experiment configuration and design bundles (TOML).

A config has the sections [model], [constraints], [synthesis],
[controller], [simulation] and [objective]. Keys are validated against a
per-model schema; unknown keys are rejected with their dotted path.
Physical quantities carry their unit in the key name (``_s``, ``_m``,
``_deg``, ``_au`` for the arbitrary units of the orbital example).
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .dynamics import DisturbanceBox, SystemModel, bicycle_model, cwh_model, integrator_model
from .geometry import Ellipsoid, PaddingSchedule, Polytope
from .synthesis import RpiTube, TerminalCbf

DEG = np.pi / 180.0
BUNDLE_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; ``path`` names the key."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


REQ = object()

_MODEL_KEYS = {
    "integrator": {"kind": REQ},
    "cwh": {"kind": REQ, "n_orbit_rad_s": REQ, "ts_s": REQ},
    "bicycle": {"kind": REQ, "wheelbase_m": 0.09, "ts_s": 0.05},
}

_CONSTRAINT_KEYS = {
    "integrator": {"state_bound_au": REQ, "input_bound_au": REQ, "disturbance_bound_au": REQ},
    "cwh": {"position_bound_au": REQ, "velocity_bound_au": REQ, "input_bound_au": REQ,
            "velocity_disturbance_au": REQ},
    "bicycle": {"lane_half_width_m": REQ, "heading_bound_deg": REQ, "speed_min_m_s": REQ,
                "speed_max_m_s": REQ, "steering_bound_deg": REQ,
                "steering_change_bound_deg": REQ, "accel_bound_m_s2": REQ,
                "heading_disturbance_deg": REQ},
}

_SYNTHESIS_KEYS = {
    "method": "sdp",
    "lambda_step": 0.01,
    "terminal_contraction": 1.0,
    "gamma_floor": 1e-6,
    "terminal_rescale": 0.99,
    "grid_points_per_axis": 5,
    "steady_speed_m_s": None,
    # fixed designs
    "rpi_shape": None,
    "rpi_gain": None,
    "terminal_p": None,
    "terminal_gain": None,
    "gamma_f": None,
}

_CONTROLLER_KEYS = {
    "horizon": REQ,
    "horizon_ci": None,
    "alpha_f": 1e6,
    "pad_step": 1e-3,
    "mode": "two_step",
    "c_alpha": 0.0,
}

_SIMULATION_KEYS = {
    "scenario": REQ,
    "steps": REQ,
    "x0": REQ,
    "disturbance_policy": "uniform",
    "seed": 0,
    "human_gain": None,
}

_OBJECTIVE_KEYS = {"kind": "fuel", "Q": None, "R": None, "z_ref": None}


def _check_section(doc: dict, name: str, schema: dict) -> dict:
    raw = doc.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(name, "must be a table")
    out = {}
    for key in raw:
        if key not in schema:
            raise ConfigError(f"{name}.{key}", "unknown key")
    for key, default in schema.items():
        if key in raw:
            out[key] = raw[key]
        elif default is REQ:
            raise ConfigError(f"{name}.{key}", "missing required key")
        else:
            out[key] = default
    return out


def _num(path, val, positive=False, nonneg=False) -> float:
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(path, f"expected a number, got {val!r}")
    val = float(val)
    if not np.isfinite(val):
        raise ConfigError(path, "must be finite")
    if positive and val <= 0:
        raise ConfigError(path, "must be positive")
    if nonneg and val < 0:
        raise ConfigError(path, "must be nonnegative")
    return val


def _arr(path, val, shape=None) -> np.ndarray:
    try:
        a = np.asarray(val, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(path, "expected a numeric array") from None
    if a.dtype == object or not np.all(np.isfinite(a)):
        raise ConfigError(path, "expected a finite numeric array")
    if shape is not None and a.shape != shape:
        raise ConfigError(path, f"expected shape {shape}, got {a.shape}")
    return a


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description."""

    raw: dict
    model: dict
    constraints: dict
    synthesis: dict
    controller: dict
    simulation: dict
    objective: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        for key in doc:
            if key not in ("model", "constraints", "synthesis", "controller",
                           "simulation", "objective"):
                raise ConfigError(key, "unknown section")
        kind = doc.get("model", {}).get("kind")
        if kind not in _MODEL_KEYS:
            raise ConfigError("model.kind", f"expected one of {sorted(_MODEL_KEYS)}, got {kind!r}")
        cfg = cls(
            raw=doc,
            model=_check_section(doc, "model", _MODEL_KEYS[kind]),
            constraints=_check_section(doc, "constraints", _CONSTRAINT_KEYS[kind]),
            synthesis=_check_section(doc, "synthesis", _SYNTHESIS_KEYS),
            controller=_check_section(doc, "controller", _CONTROLLER_KEYS),
            simulation=_check_section(doc, "simulation", _SIMULATION_KEYS),
            objective=_check_section(doc, "objective", _OBJECTIVE_KEYS),
        )
        cfg._validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                doc = tomli.load(fh)
        except FileNotFoundError:
            raise ConfigError(str(path), "file not found") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"malformed TOML ({exc})") from None
        return cls.from_dict(doc)

    @property
    def kind(self) -> str:
        return self.model["kind"]

    @property
    def scenario(self) -> str:
        return str(self.simulation["scenario"])

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def _validate(self):
        m, c, ctl, sim = self.model, self.constraints, self.controller, self.simulation
        for key, val in m.items():
            if key != "kind":
                _num(f"model.{key}", val, positive=True)
        for key, val in c.items():
            if key != "speed_min_m_s":
                _num(f"constraints.{key}", val, nonneg=key.endswith("disturbance_au")
                     or key.endswith("disturbance_deg"), positive=not key.endswith(
                         ("disturbance_au", "disturbance_deg")))
        if self.kind == "bicycle":
            lo = _num("constraints.speed_min_m_s", c["speed_min_m_s"], positive=True)
            if lo >= c["speed_max_m_s"]:
                raise ConfigError("constraints.speed_min_m_s", "must be below speed_max_m_s")
            if c["steering_bound_deg"] >= 90:
                raise ConfigError("constraints.steering_bound_deg", "must stay below 90 degrees")
        N = ctl["horizon"]
        if not isinstance(N, int) or N < 1:
            raise ConfigError("controller.horizon", "must be a positive integer")
        if ctl["horizon_ci"] is not None and (not isinstance(ctl["horizon_ci"], int)
                                              or ctl["horizon_ci"] < 1):
            raise ConfigError("controller.horizon_ci", "must be a positive integer")
        _num("controller.alpha_f", ctl["alpha_f"], positive=True)
        _num("controller.pad_step", ctl["pad_step"], positive=True)
        if ctl["mode"] not in ("two_step", "multiobjective", "multi", "nominal"):
            raise ConfigError("controller.mode", f"unknown mode {ctl['mode']!r}")
        ca = _num("controller.c_alpha", ctl["c_alpha"], nonneg=True)
        if ca >= 1:
            raise ConfigError("controller.c_alpha", "must lie in [0, 1)")
        if not isinstance(sim["steps"], int) or sim["steps"] < 1:
            raise ConfigError("simulation.steps", "must be a positive integer")
        n = self.build_model().n_x
        _arr("simulation.x0", sim["x0"], (n,))
        if sim["disturbance_policy"] not in ("uniform", "vertices", "zero", "adversarial-heading"):
            raise ConfigError("simulation.disturbance_policy",
                              f"unknown policy {sim['disturbance_policy']!r}")
        if not isinstance(sim["seed"], int):
            raise ConfigError("simulation.seed", "must be an integer")
        if sim["human_gain"] is not None:
            _arr("simulation.human_gain", sim["human_gain"], (self.build_model().n_u, n))
        if self.objective["kind"] not in ("fuel", "filter", "quadratic-tracking", "barrier"):
            raise ConfigError("objective.kind", f"unknown objective {self.objective['kind']!r}")
        if self.objective["kind"] == "filter" and sim["human_gain"] is None:
            raise ConfigError("simulation.human_gain", "the filter objective needs a proposed input")
        if self.synthesis["method"] not in ("sdp", "fixed"):
            raise ConfigError("synthesis.method", "expected 'sdp' or 'fixed'")
        if self.synthesis["method"] == "fixed":
            for key in ("rpi_shape", "rpi_gain", "terminal_p", "terminal_gain"):
                if self.synthesis[key] is None:
                    raise ConfigError(f"synthesis.{key}", "required for a fixed design")

    # -- builders -----------------------------------------------------

    def build_model(self) -> SystemModel:
        m = self.model
        if self.kind == "cwh":
            return cwh_model(float(m["n_orbit_rad_s"]), float(m["ts_s"]))
        if self.kind == "bicycle":
            return bicycle_model(float(m["wheelbase_m"]), float(m["ts_s"]))
        return integrator_model()

    def build_sets(self) -> tuple[Polytope, Polytope, DisturbanceBox]:
        c = self.constraints
        if self.kind == "cwh":
            xb = np.r_[[c["position_bound_au"]] * 3, [c["velocity_bound_au"]] * 3]
            X = Polytope.box(-xb, xb)
            U = Polytope.box([-c["input_bound_au"]] * 3, [c["input_bound_au"]] * 3)
            w = np.r_[0.0, 0.0, 0.0, [c["velocity_disturbance_au"]] * 3]
            return X, U, DisturbanceBox(-w, w)
        if self.kind == "bicycle":
            lo = np.r_[-c["lane_half_width_m"], -c["heading_bound_deg"] * DEG,
                       c["speed_min_m_s"], -c["steering_bound_deg"] * DEG]
            hi = np.r_[c["lane_half_width_m"], c["heading_bound_deg"] * DEG,
                       c["speed_max_m_s"], c["steering_bound_deg"] * DEG]
            ub = np.r_[c["steering_change_bound_deg"] * DEG, c["accel_bound_m_s2"]]
            w = np.r_[0.0, c["heading_disturbance_deg"] * DEG, 0.0, 0.0]
            return Polytope.box(lo, hi), Polytope.box(-ub, ub), DisturbanceBox(-w, w)
        X = Polytope.box([-c["state_bound_au"]], [c["state_bound_au"]])
        U = Polytope.box([-c["input_bound_au"]], [c["input_bound_au"]])
        return X, U, DisturbanceBox.symmetric([c["disturbance_bound_au"]])

    def horizon(self, profile: str | None = None) -> int:
        if profile == "ci" and self.controller["horizon_ci"] is not None:
            return int(self.controller["horizon_ci"])
        if profile not in (None, "full", "ci"):
            raise ConfigError("profile", f"unknown profile {profile!r}")
        return int(self.controller["horizon"])

    def padding(self, horizon: int) -> PaddingSchedule:
        return PaddingSchedule.linear(horizon, float(self.controller["pad_step"]))

    def center(self) -> tuple[np.ndarray | None, np.ndarray | None]:
        """Operating point the terminal set is centred on (bicycle only)."""
        vs = self.synthesis["steady_speed_m_s"]
        if vs is None:
            return None, None
        model = self.build_model()
        c = np.zeros(model.n_x)
        c[2] = float(vs)
        return c, np.zeros(model.n_u)


# -- design bundles ---------------------------------------------------


@dataclass
class DesignBundle:
    """Offline synthesis result consumed by the controllers."""

    tube: RpiTube
    cbf: TerminalCbf
    horizon: int
    model_hash: str
    config_hash: str
    report: dict

    def to_dict(self) -> dict:
        cbf = self.cbf
        d = {
            "meta": {"version": BUNDLE_VERSION, "model_hash": self.model_hash,
                     "config_hash": self.config_hash, "horizon": self.horizon},
            "rpi": {"shape": self.tube.E.shape.tolist(), "gain": self.tube.K.tolist(),
                    "contraction": float(self.tube.contraction)},
            "terminal": {"P": cbf.P.tolist(), "gain": cbf.K.tolist(), "gamma_f": cbf.gamma_f,
                         "rho": cbf.rho, "center": cbf.center.tolist(),
                         "u_center": cbf.u_center.tolist()},
            "report": self.report,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DesignBundle":
        try:
            meta, rpi, term = d["meta"], d["rpi"], d["terminal"]
            if meta.get("version") != BUNDLE_VERSION:
                raise ConfigError("meta.version", f"unsupported bundle version {meta.get('version')}")
            tube = RpiTube(Ellipsoid(np.array(rpi["shape"], dtype=float)),
                           np.array(rpi["gain"], dtype=float), float(rpi["contraction"]))
            cbf = TerminalCbf(np.array(term["P"], dtype=float), float(term["gamma_f"]),
                              np.array(term["gain"], dtype=float), float(term["rho"]),
                              np.array(term["center"], dtype=float),
                              np.array(term["u_center"], dtype=float))
            return cls(tube, cbf, int(meta["horizon"]), str(meta["model_hash"]),
                       str(meta["config_hash"]), dict(d.get("report", {})))
        except KeyError as exc:
            raise ConfigError(f"bundle.{exc.args[0]}", "missing key") from None

    def save(self, path):
        atomic_write(path, tomli_w.dumps(_plain(self.to_dict())))

    @classmethod
    def load(cls, path) -> "DesignBundle":
        try:
            with open(path, "rb") as fh:
                return cls.from_dict(tomli.load(fh))
        except FileNotFoundError:
            raise ConfigError(str(path), "bundle not found") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"malformed bundle ({exc})") from None

    def check(self, cfg: ExperimentConfig, model: SystemModel):
        """Refuse a bundle built for another model or configuration."""
        if self.model_hash != model.digest():
            raise ConfigError("bundle.meta.model_hash", "bundle was synthesised for another model")
        if self.config_hash != design_hash(cfg, self.horizon):
            raise ConfigError("bundle.meta.config_hash",
                              "bundle does not match the constraints/synthesis settings")


def design_hash(cfg: ExperimentConfig, horizon: int) -> str:
    """Hash of everything the offline design depends on."""
    blob = json.dumps({"model": cfg.model, "constraints": cfg.constraints,
                       "synthesis": cfg.synthesis, "horizon": horizon,
                       "pad_step": cfg.controller["pad_step"]},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def atomic_write(path, data: str | bytes):
    """Write via a temporary file in the target directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
