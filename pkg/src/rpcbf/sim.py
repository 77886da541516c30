"""Closed-loop simulation: plant, controller, seeded disturbances, logs."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .controller import ControllerState, controller_step
from .dynamics import DisturbanceBox, SystemModel
from .geometry import Polytope
from .pcbf import InvariantViolation, ObjectiveSpec, PcbfSpec

logger = logging.getLogger(__name__)

POLICIES = ("uniform", "vertices", "zero", "adversarial-heading")
HEADING = 1
LATERAL = 0


@dataclass
class ScenarioConfig:
    name: str
    spec: PcbfSpec
    W: DisturbanceBox
    mode: str
    c_alpha: float
    T: int
    x0: np.ndarray
    objective: ObjectiveSpec = field(default_factory=lambda: ObjectiveSpec("fuel"))
    policy: str = "uniform"
    seed: int = 0
    human_gain: np.ndarray | None = None
    human_ref: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("task length must be at least 1")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown disturbance policy {self.policy!r}")
        self.x0 = np.asarray(self.x0, dtype=float)

    def proposal(self, x) -> np.ndarray | None:
        if self.human_gain is None:
            return None
        ref = 0.0 if self.human_ref is None else self.human_ref
        return self.human_gain @ (np.asarray(x) - ref)


@dataclass
class StepRecord:
    k: int
    x: np.ndarray
    u: np.ndarray
    p: np.ndarray
    w: np.ndarray
    h: float
    bound: float
    dh: float
    cost_step: float
    solve_ms: float
    feasible: bool


@dataclass
class RunLog:
    records: list
    meta: dict
    x_final: np.ndarray | None = None
    failure: dict | None = None
    X: Polytope | None = None

    def __len__(self):
        return len(self.records)

    @property
    def states(self) -> np.ndarray:
        xs = [r.x for r in self.records]
        if self.x_final is not None:
            xs.append(self.x_final)
        return np.array(xs)

    @property
    def summary(self) -> dict:
        return summarize(self)


def sample_disturbance(policy: str, box: DisturbanceBox, rng: np.random.Generator,
                       x=None) -> np.ndarray:
    """One disturbance draw. ``adversarial-heading`` rotates the heading
    away from the lane centre (needs the current state ``x``)."""
    if policy == "zero":
        return np.zeros(box.dim)
    if policy == "uniform":
        return rng.uniform(box.lower, box.upper)
    if policy == "vertices":
        pick = rng.integers(0, 2, size=box.dim).astype(bool)
        return np.where(pick, box.upper, box.lower)
    if policy == "adversarial-heading":
        if x is None:
            raise ValueError("adversarial-heading needs the current state")
        w = np.zeros(box.dim)
        w[HEADING] = box.upper[HEADING] if x[LATERAL] >= 0 else box.lower[HEADING]
        return w
    raise ValueError(f"unknown disturbance policy {policy!r}")


def _step_cost(obj: ObjectiveSpec, x, u, p) -> float:
    if obj.kind == "filter":
        return float(np.abs(u - p).sum())
    if obj.kind == "quadratic-tracking":
        dx = x - (0.0 if obj.z_ref is None else obj.z_ref)
        return float(dx @ obj.Q @ dx + u @ obj.R @ u)
    return float(np.abs(u).sum())


def run_closed_loop(cfg: ScenarioConfig) -> RunLog:
    """Simulate T steps. An invariant failure stops the run; the log up to
    the failing step is returned with ``failure`` set."""
    spec = cfg.spec
    model: SystemModel = spec.model
    rng = np.random.default_rng(cfg.seed)
    state = ControllerState(cfg.mode, cfg.c_alpha)
    x = cfg.x0.copy()
    meta = {"scenario": cfg.name, "mode": state.mode, "c_alpha": cfg.c_alpha,
            "seed": cfg.seed, "policy": cfg.policy, "horizon": spec.N, "steps": cfg.T,
            "objective": cfg.objective.kind, **cfg.meta}
    log = RunLog([], meta, X=spec.X)
    for k in range(cfg.T):
        p = cfg.proposal(x)
        try:
            u, d = controller_step(spec, state, x, p, cfg.objective)
        except (InvariantViolation, RuntimeError) as exc:
            log.failure = {"step": k, "error": str(exc)}
            logger.error("step %d: %s", k, exc)
            break
        w = sample_disturbance(cfg.policy, cfg.W, rng, x)
        p_rec = np.zeros(model.n_u) if p is None else np.asarray(p, dtype=float)
        log.records.append(StepRecord(k, x.copy(), np.asarray(u, dtype=float), p_rec, w,
                                      d.h, d.bound, d.dh, _step_cost(cfg.objective, x, u, p_rec),
                                      d.solve_ms, d.status != "fallback"))
        x = model.step(x, u, w)
    log.x_final = x
    return log


def summarize(log: RunLog, tol: float = 1e-9) -> dict:
    """Totals and entry statistics, recomputed from the records."""
    recs = log.records
    cost = float(sum(r.cost_step for r in recs))
    X = log.X
    states = log.states
    steps_to_x = None
    max_viol = None
    if X is not None and len(states):
        res = np.array([X.residual(s).max() for s in states])
        inside = np.flatnonzero(res <= tol)
        if inside.size:
            steps_to_x = int(inside[0])
            max_viol = float(max(0.0, res[steps_to_x:].max()))
    steps_to_s = next((r.k for r in recs if r.h <= 1e-4), None)
    ms = np.array([r.solve_ms for r in recs]) if recs else np.zeros(1)
    return {
        "total_cost": cost,
        "steps": len(recs),
        "steps_to_X": steps_to_x,
        "steps_to_S": steps_to_s,
        "max_violation_after_entry": max_viol,
        "fallback_steps": int(sum(not r.feasible for r in recs)),
        "median_solve_ms": float(np.median(ms)),
        "p95_solve_ms": float(np.percentile(ms, 95)),
        "mean_solve_ms": float(ms.mean()),
        "max_solve_ms": float(ms.max()),
        "failed_at": None if log.failure is None else log.failure["step"],
    }


# -- persistence ------------------------------------------------------

def csv_columns(n_x: int, n_u: int, n_w: int) -> list[str]:
    return (["k"] + [f"x{i}" for i in range(n_x)] + [f"u{i}" for i in range(n_u)]
            + [f"p{i}" for i in range(n_u)] + [f"w{i}" for i in range(n_w)]
            + ["h", "bound", "dh", "cost_step", "solve_ms", "feasible"])


def _fmt(v: float) -> str:
    return repr(float(v))


def log_to_csv(log: RunLog) -> str:
    """CSV text with a ``# meta:`` JSON preamble line."""
    meta = dict(log.meta)
    meta["x_final"] = None if log.x_final is None else [float(v) for v in log.x_final]
    meta["failure"] = log.failure
    if log.X is not None:
        meta["X"] = {"A": log.X.A.tolist(), "b": log.X.b.tolist()}
    buf = io.StringIO()
    buf.write("# meta: " + json.dumps(meta, sort_keys=True) + "\n")
    if log.records:
        r0 = log.records[0]
        cols = csv_columns(len(r0.x), len(r0.u), len(r0.w))
    else:
        cols = ["k", "h", "bound", "dh", "cost_step", "solve_ms", "feasible"]
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(cols)
    for r in log.records:
        wr.writerow([r.k, *map(_fmt, r.x), *map(_fmt, r.u), *map(_fmt, r.p), *map(_fmt, r.w),
                     _fmt(r.h), _fmt(r.bound), _fmt(r.dh), _fmt(r.cost_step),
                     f"{r.solve_ms:.3f}", int(r.feasible)])
    return buf.getvalue()


def log_from_csv(text: str) -> RunLog:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# meta: "):
        raise ValueError("missing '# meta:' preamble")
    meta = json.loads(lines[0][len("# meta: "):])
    rows = list(csv.reader(lines[1:]))
    header, body = rows[0], rows[1:]
    idx = {c: i for i, c in enumerate(header)}

    def group(prefix):
        return [idx[c] for c in header if c[0] == prefix and c[1:].isdigit()]

    gx, gu, gp, gw = group("x"), group("u"), group("p"), group("w")
    recs = []
    for row in body:
        f = lambda cols: np.array([float(row[i]) for i in cols])  # noqa: E731
        recs.append(StepRecord(int(row[idx["k"]]), f(gx), f(gu), f(gp), f(gw),
                               float(row[idx["h"]]), float(row[idx["bound"]]),
                               float(row[idx["dh"]]), float(row[idx["cost_step"]]),
                               float(row[idx["solve_ms"]]), row[idx["feasible"]] == "1"))
    X = None
    if meta.get("X"):
        X = Polytope(np.array(meta["X"]["A"]), np.array(meta["X"]["b"]))
    xf = meta.pop("x_final", None)
    failure = meta.pop("failure", None)
    meta.pop("X", None)
    return RunLog(recs, meta, None if xf is None else np.array(xf), failure, X)


def log_filename(log: RunLog) -> str:
    m = log.meta
    mode = m["mode"]
    if mode == "multiobjective":
        mode = f"multi-c{m['c_alpha']:g}"
    return f"{m['scenario']}_{mode}_{m['seed']}.csv"


# -- comparison -------------------------------------------------------

@dataclass
class ComparisonReport:
    rows: list
    monotone_in_c_alpha: bool | None

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["label", "scenario", "mode", "c_alpha", "seed", "policy", "total_cost",
                "reduction_pct", "median_solve_ms", "p95_solve_ms", "mean_solve_ms",
                "max_solve_ms", "steps_to_X", "steps_to_S", "fallback_steps"]
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(cols)
        for r in self.rows:
            wr.writerow(["" if r[c] is None else r[c] for c in cols])
        return buf.getvalue()


def _label(meta: dict) -> str:
    if meta["mode"] == "multiobjective":
        return f"multi c_alpha={meta['c_alpha']:g}"
    return meta["mode"]


def compare_runs(logs: list[RunLog]) -> ComparisonReport:
    """Tabulate runs against the first one (the baseline). All logs must
    share scenario, seed and disturbance policy."""
    if len(logs) < 2:
        raise ValueError("need at least two logs to compare")
    keys = ("scenario", "seed", "policy")
    ref = {k: logs[0].meta.get(k) for k in keys}
    for lg in logs[1:]:
        for k in keys:
            if lg.meta.get(k) != ref[k]:
                raise ValueError(f"logs differ in {k}: {lg.meta.get(k)!r} vs {ref[k]!r}")
    base = summarize(logs[0])["total_cost"]
    rows = []
    for lg in logs:
        s = summarize(lg)
        red = 0.0 if base == 0 else 100.0 * (base - s["total_cost"]) / base
        rows.append({"label": _label(lg.meta), "scenario": lg.meta["scenario"],
                     "mode": lg.meta["mode"], "c_alpha": lg.meta["c_alpha"],
                     "seed": lg.meta["seed"], "policy": lg.meta["policy"],
                     "total_cost": s["total_cost"], "reduction_pct": red,
                     "median_solve_ms": s["median_solve_ms"], "p95_solve_ms": s["p95_solve_ms"],
                     "mean_solve_ms": s["mean_solve_ms"], "max_solve_ms": s["max_solve_ms"],
                     "steps_to_X": s["steps_to_X"], "steps_to_S": s["steps_to_S"],
                     "fallback_steps": s["fallback_steps"]})
    multi = sorted((r for r in rows if r["mode"] == "multiobjective"), key=lambda r: r["c_alpha"])
    monotone = None
    if len(multi) >= 3:
        costs = [r["total_cost"] for r in multi]
        monotone = all(b <= a * (1 + 1e-9) for a, b in zip(costs, costs[1:]))
        if not monotone:
            logger.warning("cost is not monotone non-increasing in c_alpha: %s", costs)
    return ComparisonReport(rows, monotone)
