"""Slack minimisation, primary-objective and multiobjective PCBF programs,
the shifted warmstart and the barrier decrease.

Linear models are solved as one convex program (cvxpy + Clarabel). For
nonlinear models the same program is solved with dynamics linearised
about a dynamically consistent iterate; every accepted iterate is a
rollout of the true nominal map, so returned trajectories are always
exactly consistent and, for the slack-fixed and bounded problems, start
from a known feasible point and stay feasible.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .dynamics import SystemModel
from .geometry import Ellipsoid, PaddingSchedule, Polytope, tighten
from .synthesis import RpiTube, TerminalCbf

logger = logging.getLogger(__name__)

QP_SOLVER = "CLARABEL"
SOLVER_OPTS = {"tol_feas": 1e-9, "tol_gap_abs": 1e-9, "tol_gap_rel": 1e-9}
# retried in order when a solve errors out or stalls
FALLBACK_OPTS = ({"tol_feas": 1e-8, "tol_gap_abs": 1e-8, "tol_gap_rel": 1e-8}, {})
# fixed slacks and the warmstart bound are relaxed by this relative amount so
# that the (possibly degenerate) feasible set keeps a nonempty interior
SLACK_RELAX = 1e-7
# the terminal set is shrunk by this level inside the programs: alpha_f
# amplifies solver-level violations of h_f(z_N) <= xi_N by six orders
TERMINAL_MARGIN = 1e-8
SQP_TRUST_RADIUS = 0.5
SQP_STEP_TOL = 1e-6
SQP_MAX_ITER = 30
SQP_FEAS_TOL = 1e-6
# stop once an accepted step improves the merit by less than this (relative)
SQP_MERIT_TOL = 1e-7


class InvariantViolation(RuntimeError):
    """A property guaranteed by construction failed at runtime."""


@dataclass(frozen=True)
class ObjectiveSpec:
    """Primary objective J.

    ``fuel``: sum of |v_i|_1; ``filter``: |v_0 + K_e (x - z_0) - p|_1;
    ``quadratic-tracking``: sum (z-z_ref)'Q(z-z_ref) + v'Rv;
    ``barrier``: the slack penalty itself.
    """

    kind: str = "fuel"
    Q: np.ndarray | None = None
    R: np.ndarray | None = None
    z_ref: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("fuel", "filter", "quadratic-tracking", "barrier"):
            raise ValueError(f"unknown objective kind {self.kind!r}")


@dataclass(frozen=True)
class SlackSequence:
    stage: np.ndarray
    terminal: float

    def __post_init__(self):
        st = np.atleast_2d(np.asarray(self.stage, dtype=float))
        if np.any(st < 0) or self.terminal < 0:
            raise ValueError("slacks must be nonnegative")
        object.__setattr__(self, "stage", st)
        object.__setattr__(self, "terminal", float(self.terminal))

    @classmethod
    def zeros(cls, N: int, r: int) -> "SlackSequence":
        return cls(np.zeros((N, r)), 0.0)

    @property
    def horizon(self) -> int:
        return self.stage.shape[0]

    def is_zero(self, tol: float = 0.0) -> bool:
        return bool(np.all(self.stage <= tol) and self.terminal <= tol)


@dataclass
class PcbfSolution:
    z: np.ndarray
    v: np.ndarray
    xi: SlackSequence
    objective: float
    h_value: float
    iterations: int = 1
    solve_time: float = 0.0
    status: str = "optimal"


@dataclass
class WarmstartState:
    xi_warm: SlackSequence
    xi_prev_opt: SlackSequence
    v_warm: np.ndarray
    z_warm: np.ndarray


@dataclass(eq=False)
class PcbfSpec:
    """Problem data shared by all three programs.

    With ``nominal=True`` the initial state is pinned (z_0 = x) and the
    constraints are not tightened by the tube.
    """

    model: SystemModel
    N: int
    X: Polytope
    U: Polytope
    tube: RpiTube
    cbf: TerminalCbf
    pad: PaddingSchedule
    alpha_f: float = 1e6
    nominal: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon must be at least 1")
        if self.alpha_f <= 0:
            raise ValueError("alpha_f must be positive")
        if len(self.pad) != self.N:
            raise ValueError("padding schedule length must equal the horizon")
        E = Ellipsoid.zero(self.model.n_x) if self.nominal else self.tube.E
        self.X_bar = tighten(self.X, E, 0.0)
        KE = Ellipsoid.zero(self.model.n_u) if self.nominal else self.tube.input_set
        self.U_tight = tighten(self.U, KE, 0.0)
        if np.any(self.U_tight.b < 0) and self.U_tight.box_bounds() is not None:
            lo, hi = self.U_tight.box_bounds()
            if np.any(lo > hi):
                raise ValueError("tightened input set is empty")
        self.stage_b = self.X_bar.b[None, :] - np.asarray(self.pad.deltas)[:, None]

    @property
    def n_rows(self) -> int:
        return self.X.n_rows

    @property
    def error_gain(self) -> np.ndarray:
        if self.nominal:
            return np.zeros((self.model.n_u, self.model.n_x))
        return self.tube.K

    @property
    def tube_set(self) -> Ellipsoid:
        return Ellipsoid.zero(self.model.n_x) if self.nominal else self.tube.E

    def as_nominal(self) -> "PcbfSpec":
        if self.nominal:
            return self
        if "nominal" not in self._cache:
            self._cache["nominal"] = PcbfSpec(
                self.model, self.N, self.X, self.U,
                RpiTube.degenerate(self.model.n_x, self.model.n_u),
                self.cbf, self.pad, self.alpha_f, nominal=True)
        return self._cache["nominal"]

    def rollout(self, z0, v) -> np.ndarray:
        z = np.empty((self.N + 1, self.model.n_x))
        z[0] = z0
        for i in range(self.N):
            z[i + 1] = self.model.step(z[i], v[i])
        return z

    def stage_violation(self, z_i, i: int) -> np.ndarray:
        """c_bar(z) + Delta_i per row: the slack stage i needs."""
        return self.X_bar.A @ z_i - self.stage_b[i]

    def min_slacks(self, z) -> SlackSequence:
        st = np.maximum(0.0, z[:-1] @ self.X_bar.A.T - self.stage_b)
        return SlackSequence(st, max(0.0, self.cbf.h(z[-1])))

    def terminal_input(self, z_N) -> np.ndarray:
        """pi_f(z_N), scaled radially toward u_c if it leaves U_tight."""
        u = self.cbf.policy(z_N)
        uc = self.cbf.u_center
        d = u - uc
        ad = self.U_tight.A @ d
        room = self.U_tight.b - self.U_tight.A @ uc
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(ad > 0, room / ad, np.inf)
        theta = min(1.0, float(ratios.min()))
        return uc + max(theta, 0.0) * d

    def in_tube(self, x, z0, tol: float = 1e-6) -> bool:
        from .geometry import contains
        return contains(self.tube_set, np.asarray(x) - np.asarray(z0), tol)


def htilde(xi: SlackSequence, alpha_f: float) -> float:
    return float(alpha_f * xi.terminal + np.sum(np.abs(xi.stage)))


def decrease(xi_prev: SlackSequence, xi_warm: SlackSequence, alpha_f: float,
             strict: bool = False) -> float:
    """Barrier decrease h~(xi_prev) - h~(xi_warm) granted by the warmstart."""
    h_prev = htilde(xi_prev, alpha_f)
    d = h_prev - htilde(xi_warm, alpha_f)
    if d < -1e-9 * (1.0 + abs(h_prev)):
        msg = f"warmstart increases the barrier value (decrease {d:.3e})"
        if strict:
            raise InvariantViolation(msg)
        logger.warning(msg)
    return d


def decrease_expanded(xi_prev: SlackSequence, xi_warm: SlackSequence, alpha_f: float) -> float:
    """The same decrease written as a telescoping sum over shifted stages."""
    N = xi_prev.horizon
    n1 = lambda a: float(np.sum(np.abs(a)))  # noqa: E731
    out = alpha_f * (xi_prev.terminal - xi_warm.terminal) - n1(xi_warm.stage[N - 1])
    out += n1(xi_prev.stage[0])
    for i in range(N - 1):
        out += n1(xi_prev.stage[i + 1]) - n1(xi_warm.stage[i])
    return out


def eval_terminal(cbf: TerminalCbf, z) -> tuple[float, np.ndarray]:
    return cbf.h(z), cbf.policy(z)


def warmstart_shift(spec: PcbfSpec, sol: PcbfSolution) -> WarmstartState:
    """Shift the solution one step and append the terminal policy."""
    N = spec.N
    zN = sol.z[N]
    uN = spec.terminal_input(zN)
    z_next = spec.model.step(zN, uN)
    v_warm = np.vstack([sol.v[1:], uN[None, :]])
    z_warm = np.vstack([sol.z[1:], z_next[None, :]])
    d = np.asarray(spec.pad.deltas)
    stage = np.empty_like(sol.xi.stage)
    for i in range(N - 1):
        stage[i] = np.maximum(0.0, sol.xi.stage[i + 1] + (d[i] - d[i + 1]))
    stage[N - 1] = np.maximum(0.0, spec.stage_violation(zN, N - 1))
    term = max(0.0, spec.cbf.h(z_next))
    return WarmstartState(SlackSequence(stage, term), sol.xi, v_warm, z_warm)


def objective_value(spec: PcbfSpec, obj: ObjectiveSpec, x, z, v, xi: SlackSequence, p=None) -> float:
    if obj.kind == "fuel":
        return float(np.sum(np.abs(v)))
    if obj.kind == "filter":
        return float(np.sum(np.abs(v[0] + spec.error_gain @ (np.asarray(x) - z[0]) - np.asarray(p))))
    if obj.kind == "barrier":
        return htilde(xi, spec.alpha_f)
    dz = z - (0.0 if obj.z_ref is None else obj.z_ref)
    return float(np.einsum("ij,jk,ik->", dz, obj.Q, dz) + np.einsum("ij,jk,ik->", v, obj.R, v))


class _Program:
    """One compiled cvxpy program; parameters are refreshed per solve.

    kind: ``slack`` (free slacks, barrier cost), ``fixed`` (slacks are
    parameters), ``bound`` (free slacks under a barrier-value bound).
    """

    def __init__(self, spec: PcbfSpec, kind: str, obj: ObjectiveSpec):
        m = spec.model
        n, nu, N, r = m.n_x, m.n_u, spec.N, spec.n_rows
        self.spec, self.kind, self.obj = spec, kind, obj
        self.linear = m.is_linear
        self.x = cp.Parameter(n)
        z = self.z = cp.Variable((N + 1, n))
        v = self.v = cp.Variable((N, nu))
        if kind == "fixed":
            self.xi_p = cp.Parameter((N, r), nonneg=True)
            self.xiN_p = cp.Parameter(nonneg=True)
            xi, xiN = self.xi_p, self.xiN_p
        else:
            xi = self.xi = cp.Variable((N, r), nonneg=True)
            # signed terminal level; the barrier charges only its positive part
            xiN = self.xiN = cp.Variable()
        cons = []
        L, Nul = spec.tube_set.factor()
        if L.shape[0]:
            cons.append(cp.norm(L @ (self.x - z[0])) <= 1.0)
        if Nul.shape[0]:
            cons.append(Nul @ (self.x - z[0]) == 0)
        if self.linear:
            cons.append(z[1:].T == m.A @ z[:-1].T + m.B @ v.T)
        else:
            self.Ap = [cp.Parameter((n, n)) for _ in range(N)]
            self.Bp = [cp.Parameter((n, nu)) for _ in range(N)]
            self.cp_ = [cp.Parameter(n) for _ in range(N)]
            for i in range(N):
                cons.append(z[i + 1] == self.Ap[i] @ z[i] + self.Bp[i] @ v[i] + self.cp_[i])
            self.zbar = cp.Parameter((N + 1, n))
            cons.append(cp.abs(z - self.zbar) <= SQP_TRUST_RADIUS)
        Ut = spec.U_tight
        cons.append(v @ Ut.A.T <= np.tile(Ut.b, (N, 1)))
        cons.append(z[:-1] @ spec.X_bar.A.T <= spec.stage_b + xi)
        R = np.linalg.cholesky(spec.cbf.P).T
        cons.append(cp.sum_squares(R @ (z[N] - spec.cbf.center)) - 1.0 + TERMINAL_MARGIN <= xiN)
        barrier = spec.alpha_f * (xiN if kind == "fixed" else cp.pos(xiN)) + cp.sum(xi)
        if kind == "bound":
            self.bound = cp.Parameter(nonneg=True)
            # offset = TERMINAL_MARGIN undoes the shrinkage in the charged
            # amount, so a warmstart outside S_f costs exactly its h~ value
            self.offset = cp.Parameter(nonneg=True)
            cons.append(spec.alpha_f * cp.pos(xiN - self.offset) + cp.sum(xi) <= self.bound)
        self.p = None
        if kind == "slack" or obj.kind == "barrier":
            cost = barrier
        elif obj.kind == "fuel":
            cost = cp.sum(cp.abs(v))
        elif obj.kind == "filter":
            self.p = cp.Parameter(nu)
            cost = cp.norm1(v[0] + spec.error_gain @ (self.x - z[0]) - self.p)
        else:
            zr = np.zeros(n) if obj.z_ref is None else np.asarray(obj.z_ref, dtype=float)
            cost = sum(cp.quad_form(z[i] - zr, obj.Q) for i in range(N + 1))
            cost += sum(cp.quad_form(v[i], obj.R) for i in range(N))
        self.prob = cp.Problem(cp.Minimize(cost), cons)

    def solve(self, x, *, p=None, xi_fixed: SlackSequence | None = None, bound=None,
              offset: float = 0.0, lin=None):
        self.x.value = np.asarray(x, dtype=float)
        if self.p is not None:
            self.p.value = np.asarray(p, dtype=float)
        if self.kind == "fixed":
            self.xi_p.value = xi_fixed.stage + SLACK_RELAX * (1.0 + xi_fixed.stage)
            self.xiN_p.value = (xi_fixed.terminal + TERMINAL_MARGIN
                                + SLACK_RELAX * (1.0 + xi_fixed.terminal))
        if self.kind == "bound":
            self.bound.value = float(bound) + SLACK_RELAX * (1.0 + abs(bound))
            self.offset.value = float(offset)
        if lin is not None:
            As, Bs, cs, zbar = lin
            for i in range(self.spec.N):
                self.Ap[i].value = As[i]
                self.Bp[i].value = Bs[i]
                self.cp_[i].value = cs[i]
            self.zbar.value = zbar
        t0 = time.perf_counter()
        self.status = "solver_error"
        for opts in (SOLVER_OPTS,) + FALLBACK_OPTS:
            try:
                self.prob.solve(solver=QP_SOLVER, **opts)
            except cp.SolverError:
                continue
            self.status = self.prob.status
            if self.status == "optimal" and self.v.value is not None:
                break
            if self.status in ("infeasible", "unbounded"):
                break
        dt = time.perf_counter() - t0
        if self.status not in ("optimal", "optimal_inaccurate") or self.v.value is None:
            return None, dt
        return (self.z.value.copy(), self.v.value.copy()), dt


def _program(spec: PcbfSpec, kind: str, obj: ObjectiveSpec) -> _Program:
    key = (kind, obj.kind if kind != "slack" else "barrier")
    if key not in spec._cache:
        spec._cache[key] = _Program(spec, kind, obj)
    return spec._cache[key]


def _linearisation(spec: PcbfSpec, z, v):
    As, Bs, cs = [], [], []
    for i in range(spec.N):
        A, B = spec.model.jacobians(z[i], v[i])
        As.append(A)
        Bs.append(B)
        cs.append(spec.model.step(z[i], v[i]) - A @ z[i] - B @ v[i])
    return As, Bs, cs, z


def _fixed_slack_ok(spec: PcbfSpec, z, xi: SlackSequence) -> bool:
    tol = SQP_FEAS_TOL
    st = z[:-1] @ spec.X_bar.A.T - spec.stage_b
    if np.any(st > xi.stage + tol * (1.0 + xi.stage)):
        return False
    return spec.cbf.h(z[-1]) <= xi.terminal + tol * (1.0 + xi.terminal)


def _sqp(spec, prog, x, z0, v, *, merit, feasible, solve_kw):
    """Successive linearisation with rollout and backtracking.

    The start (z0, v) must satisfy ``feasible``; every accepted iterate
    does too and strictly improves ``merit``.
    """
    z = spec.rollout(z0, v)
    cur = merit(z, v)
    total_t = 0.0
    it = 0
    for it in range(1, SQP_MAX_ITER + 1):
        res, dt = prog.solve(x, lin=_linearisation(spec, z, v), **solve_kw)
        total_t += dt
        if res is None:
            break
        z_new, v_new = res
        dz0, dv = z_new[0] - z[0], v_new - v
        step = max(np.abs(dz0).max(initial=0.0), np.abs(dv).max(initial=0.0))
        if step < SQP_STEP_TOL:
            break
        accepted = False
        a = 1.0
        while a >= 1.0 / 64:
            z0_t, v_t = z[0] + a * dz0, v + a * dv
            z_t = spec.rollout(z0_t, v_t)
            m_t = merit(z_t, v_t)
            if feasible(z_t) and m_t <= cur - 1e-12 * (1.0 + abs(cur)):
                accepted = True
                break
            a *= 0.5
        if not accepted:
            break
        stalled = cur - m_t <= SQP_MERIT_TOL * (1.0 + abs(cur))
        z, v, cur = z_t, v_t, m_t
        if a * step < SQP_STEP_TOL or stalled:
            break
    return z, v, it, total_t


def _initial_guess(spec: PcbfSpec, x, init):
    if init is not None:
        z0, v = np.asarray(init[0], dtype=float), np.asarray(init[1], dtype=float)
        if spec.in_tube(x, z0, 1e-9):
            return z0, v
        return np.asarray(x, dtype=float), v
    v = np.tile(spec.cbf.u_center, (spec.N, 1))
    return np.asarray(x, dtype=float), v


def _finish(spec, obj, x, z0, v, xi, p, iterations, dt, status) -> PcbfSolution:
    z = spec.rollout(z0, v)
    if xi is None:
        xi = spec.min_slacks(z)
    J = objective_value(spec, obj, x, z, v, xi, p)
    return PcbfSolution(z, v, xi, J, htilde(xi, spec.alpha_f), iterations, dt, status)


_BARRIER = ObjectiveSpec("barrier")


def solve_slack_min(spec: PcbfSpec, x, init=None) -> PcbfSolution:
    """h(x): minimal weighted constraint violation over the horizon.

    ``init`` is an optional (z0, v) start for the nonlinear iteration."""
    x = np.asarray(x, dtype=float)
    prog = _program(spec, "slack", _BARRIER)
    if spec.model.is_linear:
        res, dt = prog.solve(x)
        if res is None:
            raise RuntimeError(f"slack minimisation failed ({prog.status})")
        z, v = res
        return _finish(spec, _BARRIER, x, z[0], v, None, None, 1, dt, prog.status)
    z0, v = _initial_guess(spec, x, init)
    merit = lambda zz, vv: htilde(spec.min_slacks(zz), spec.alpha_f)  # noqa: E731
    z, v, it, dt = _sqp(spec, prog, x, z0, v, merit=merit, feasible=lambda zz: True, solve_kw={})
    return _finish(spec, _BARRIER, x, z[0], v, None, None, it, dt, "sqp")


def solve_objective(spec: PcbfSpec, x, xi_fixed: SlackSequence, cost: ObjectiveSpec,
                    p=None, init: PcbfSolution | None = None) -> PcbfSolution:
    """Minimise the primary objective with the slacks held at ``xi_fixed``."""
    x = np.asarray(x, dtype=float)
    prog = _program(spec, "fixed", cost)
    if spec.model.is_linear:
        res, dt = prog.solve(x, p=p, xi_fixed=xi_fixed)
        if res is None:
            if init is None:
                raise InvariantViolation(
                    f"objective problem infeasible with the optimal slacks ({prog.status})")
            # the slack-minimising solution is feasible by construction
            logger.warning("objective solve %s; keeping the slack-minimising solution", prog.status)
            return _finish(spec, cost, x, init.z[0], init.v, xi_fixed, p, 1, dt, "fallback")
        z, v = res
        return _finish(spec, cost, x, z[0], v, xi_fixed, p, 1, dt, prog.status)
    if init is None:
        raise ValueError("nonlinear objective problem needs a feasible initial solution")
    z_init = spec.rollout(init.z[0], init.v)
    if not _fixed_slack_ok(spec, z_init, xi_fixed):
        raise InvariantViolation("initial solution violates the fixed slacks")
    merit = lambda zz, vv: objective_value(spec, cost, x, zz, vv, xi_fixed, p)  # noqa: E731
    z, v, it, dt = _sqp(spec, prog, x, init.z[0], init.v, merit=merit,
                        feasible=lambda zz: _fixed_slack_ok(spec, zz, xi_fixed),
                        solve_kw={"p": p, "xi_fixed": xi_fixed})
    return _finish(spec, cost, x, z[0], v, xi_fixed, p, it, dt, "sqp")


def multiobjective_bound(ws: WarmstartState, c_alpha: float, alpha_f: float) -> float:
    """Right-hand side of the barrier constraint: h~(xi_warm) + c_alpha * dh.

    A negative decrease (possible only outside the domain) is clipped at
    zero so the warmstart stays feasible."""
    dh = decrease(ws.xi_prev_opt, ws.xi_warm, alpha_f)
    return htilde(ws.xi_warm, alpha_f) + c_alpha * max(dh, 0.0)


def terminal_offset(spec: PcbfSpec, ws: WarmstartState) -> float:
    """Offset of the charged terminal level in the bounded problem.

    With the warmstart's terminal state deep inside S_f the margin stays
    charged, which keeps returned solutions strictly inside S_f. Near or
    outside the boundary it is refunded so the warmstart remains feasible."""
    return TERMINAL_MARGIN if spec.cbf.h(ws.z_warm[-1]) > -TERMINAL_MARGIN else 0.0


def bound_tolerance(spec: PcbfSpec, bound: float) -> float:
    """Admissible excess of a returned barrier value over its bound: the
    relative solver tolerance plus the terminal-row feasibility tolerance
    amplified by alpha_f."""
    return 1e-6 * (1.0 + abs(bound)) + spec.alpha_f * SOLVER_OPTS["tol_feas"]


def solve_multiobjective(spec: PcbfSpec, x, ws: WarmstartState, c_alpha: float,
                         cost: ObjectiveSpec, p=None) -> PcbfSolution:
    """Minimise J with free slacks whose barrier value is bounded by the
    warmstart value plus ``c_alpha`` times the last decrease."""
    if not 0.0 <= c_alpha < 1.0:
        raise ValueError("c_alpha must lie in [0, 1)")
    x = np.asarray(x, dtype=float)
    bound = multiobjective_bound(ws, c_alpha, spec.alpha_f)
    offset = terminal_offset(spec, ws)
    prog = _program(spec, "bound", cost)
    if spec.model.is_linear:
        res, dt = prog.solve(x, p=p, bound=bound, offset=offset)
        if res is not None:
            z, v = res
            return _finish(spec, cost, x, z[0], v, None, p, 1, dt, prog.status)
        if not spec.in_tube(x, ws.z_warm[0]):
            raise InvariantViolation(
                f"multiobjective problem {prog.status}: bound {bound:.6g}, "
                f"warmstart value {htilde(ws.xi_warm, spec.alpha_f):.6g}")
        logger.warning("multiobjective solve %s; applying the warmstart", prog.status)
        return _finish(spec, cost, x, ws.z_warm[0], ws.v_warm, None, p, 1, dt, "fallback")
    z_init = spec.rollout(ws.z_warm[0], ws.v_warm)
    tol = SQP_FEAS_TOL * (1.0 + bound)

    def ok(zz):
        return htilde(spec.min_slacks(zz), spec.alpha_f) <= bound + tol

    if not spec.in_tube(x, z_init[0]) or not ok(z_init):
        raise InvariantViolation("warmstart is not feasible for the multiobjective problem")
    merit = lambda zz, vv: objective_value(spec, cost, x, zz, vv, spec.min_slacks(zz), p)  # noqa: E731
    z, v, it, dt = _sqp(spec, prog, x, z_init[0], ws.v_warm, merit=merit, feasible=ok,
                        solve_kw={"p": p, "bound": bound, "offset": offset})
    return _finish(spec, cost, x, z[0], v, None, p, it, dt, "sqp")
