"""Offline design of the error tube and the terminal barrier function.

Both designs are convex SDPs over a finite family of (A, B) pairs. For a
linear model the family is the single pair; for a nonlinear model it is
the set of vertices of the entrywise bounding box of its Jacobians over a
region (see :func:`jacobian_vertices`), which contains every mean-value
Jacobian between two points of that region.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
import scipy.linalg

from .dynamics import DisturbanceBox, SystemModel
from .geometry import Ellipsoid, Polytope, contains, map_ellipsoid, support_on_ellipsoid

logger = logging.getLogger(__name__)

SDP_SOLVER = "CLARABEL"
LMI_TOL = 1e-8


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class RpiTube:
    """Error set E and linear error feedback e -> K e."""

    E: Ellipsoid
    K: np.ndarray
    contraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "K", np.atleast_2d(np.asarray(self.K, dtype=float)))

    @classmethod
    def degenerate(cls, n_x: int, n_u: int) -> "RpiTube":
        return cls(Ellipsoid.zero(n_x), np.zeros((n_u, n_x)), 0.0)

    @property
    def is_degenerate(self) -> bool:
        return self.E.is_degenerate

    @property
    def input_set(self) -> Ellipsoid:
        return map_ellipsoid(self.K, self.E)


@dataclass(frozen=True)
class TerminalCbf:
    """Quadratic terminal barrier h_f(z) = (z-c)' P (z-c) - 1 with policy
    pi_f(z) = u_c + K (z - c)."""

    P: np.ndarray
    gamma_f: float
    K: np.ndarray
    rho: float
    center: np.ndarray = None
    u_center: np.ndarray = None

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        c = np.zeros(P.shape[0]) if self.center is None else np.asarray(self.center, dtype=float)
        uc = np.zeros(K.shape[0]) if self.u_center is None else np.asarray(self.u_center, dtype=float)
        object.__setattr__(self, "P", 0.5 * (P + P.T))
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "center", c.reshape(-1))
        object.__setattr__(self, "u_center", uc.reshape(-1))

    def h(self, z) -> float:
        d = np.asarray(z, dtype=float) - self.center
        return float(d @ self.P @ d - 1.0)

    def policy(self, z) -> np.ndarray:
        return self.u_center + self.K @ (np.asarray(z, dtype=float) - self.center)

    def decrease(self, z) -> float:
        """Guaranteed nominal decrease (1 - rho)(h_f(z) + 1)."""
        return (1.0 - self.rho) * (self.h(z) + 1.0)

    def with_gamma(self, gamma_f: float) -> "TerminalCbf":
        return TerminalCbf(self.P, gamma_f, self.K, self.rho, self.center, self.u_center)


def disturbance_generator(W: DisturbanceBox, D: np.ndarray | None = None) -> np.ndarray:
    """G with D w in {G omega : |omega| <= 1} for every w in W.

    Uses the axis-aligned ellipsoid diag(n_a * w_i^2) over the n_a active
    channels, which passes through the vertices of the box.
    """
    wmax = W.max_abs
    active = np.flatnonzero(wmax > 0)
    n = W.dim
    D = np.eye(n) if D is None else np.asarray(D, dtype=float)
    if active.size == 0:
        return np.zeros((D.shape[0], 0))
    Gw = np.zeros((n, active.size))
    for j, i in enumerate(active):
        Gw[i, j] = np.sqrt(active.size) * wmax[i]
    G = D @ Gw
    keep = np.linalg.norm(G, axis=0) > 0
    return G[:, keep]


def jacobian_vertices(model: SystemModel, lower, upper, u_ref=None,
                      points_per_axis: int = 5) -> list[tuple[np.ndarray, np.ndarray]]:
    """Vertices of the entrywise bounding box of the Jacobians over a box
    of states. Use an odd ``points_per_axis`` so the box centre is gridded."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    u_ref = np.zeros(model.n_u) if u_ref is None else np.asarray(u_ref, dtype=float)
    axes = [np.linspace(lo, hi, points_per_axis) if hi > lo else np.array([lo])
            for lo, hi in zip(lower, upper)]
    mats = []
    for pt in itertools.product(*axes):
        A, B = model.jacobians(np.array(pt), u_ref)
        mats.append(np.hstack([A, B]))
    mats = np.array(mats)
    lo_m, hi_m = mats.min(axis=0), mats.max(axis=0)
    varying = np.argwhere(hi_m - lo_m > 1e-12 * (1 + np.abs(hi_m)))
    n = model.n_x
    out = []
    for signs in itertools.product((0, 1), repeat=len(varying)):
        M = lo_m.copy()
        for (i, j), s in zip(varying, signs):
            M[i, j] = hi_m[i, j] if s else lo_m[i, j]
        out.append((M[:, :n], M[:, n:]))
    return out


def _family(A, B, vertices):
    if vertices is not None:
        return [(np.atleast_2d(a), np.atleast_2d(b)) for a, b in vertices]
    return [(np.atleast_2d(np.asarray(A, dtype=float)), np.atleast_2d(np.asarray(B, dtype=float)))]


def _sym(M):
    return 0.5 * (M + M.T)


def _row_scales(P: Polytope, center) -> np.ndarray:
    b = P.shifted(center).b if center is not None else P.b
    if np.any(b <= 0):
        raise SynthesisError("the reference point must lie in the interior of every constraint set")
    return b


def rpi_lmi_margin(A, B, K, S, G, lam) -> float:
    """Smallest eigenvalue of the S-procedure matrix (>= 0 certifies)."""
    n = A.shape[0]
    AK = (A + B @ K) @ S
    q = G.shape[1]
    M = np.block([
        [lam * S, np.zeros((n, q)), AK.T],
        [np.zeros((q, n)), (1 - lam) * np.eye(q), G.T],
        [AK, G, S],
    ])
    return float(np.linalg.eigvalsh(_sym(M)).min())


def synth_rpi(A, B, W: DisturbanceBox, X: Polytope, U: Polytope, *,
              lambdas=None, disturbance_matrix=None, vertices=None,
              center=None, u_center=None) -> RpiTube:
    """Ellipsoidal RPI set and error gain minimising the tightening.

    For each contraction level lam on the grid, solves the S-procedure LMI
    in (S, Y = K S) while minimising the sum of squared, normalised support
    values of E on the state rows and of K E on the input rows. The grid
    point with the smallest sum of (unsquared) normalised supports wins.
    """
    fam = _family(A, B, vertices)
    n, m = fam[0][1].shape
    if W.is_zero:
        return RpiTube.degenerate(n, m)
    G = disturbance_generator(W, disturbance_matrix)
    q = G.shape[1]
    bx = _row_scales(X, center)
    bu = _row_scales(U, u_center)
    lambdas = np.round(np.arange(1, 100) * 0.01, 2) if lambdas is None else np.asarray(lambdas)

    S = cp.Variable((n, n), PSD=True)
    Y = cp.Variable((m, n))
    tau = cp.Variable(U.n_rows)
    lam = cp.Parameter(nonneg=True)
    cons = []
    for Ai, Bi in fam:
        AK = Ai @ S + Bi @ Y
        M = cp.bmat([
            [lam * S, np.zeros((n, q)), AK.T],
            [np.zeros((q, n)), (1 - lam) * np.eye(q), G.T],
            [AK, G, S],
        ])
        cons.append(_sym(M) >> 0)
    for j, a in enumerate(U.A):
        aY = (a @ Y)[None, :]
        cons.append(_sym(cp.bmat([[cp.reshape(tau[j], (1, 1), order="F"), aY], [aY.T, S]])) >> 0)
    state_cost = sum(cp.quad_form(a, S) / b**2 for a, b in zip(X.A, bx))
    cost = state_cost + cp.sum(cp.multiply(tau, 1.0 / bu**2))
    prob = cp.Problem(cp.Minimize(cost), cons)

    best, best_score, worst = None, np.inf, None
    for lv in lambdas:
        lam.value = float(lv)
        try:
            prob.solve(solver=SDP_SOLVER)
        except cp.SolverError:
            continue
        if prob.status not in ("optimal", "optimal_inaccurate") or S.value is None:
            continue
        Sv = _sym(S.value)
        if np.linalg.eigvalsh(Sv).min() <= 0:
            continue
        Kv = np.linalg.solve(Sv, Y.value.T).T
        Sv = Sv * (1.0 + 1e-7)
        margin = min(rpi_lmi_margin(Ai, Bi, Kv, Sv, G, lv) for Ai, Bi in fam)
        if worst is None or margin > worst[1]:
            worst = (lv, margin)
        if margin < -LMI_TOL * max(1.0, np.abs(Sv).max()):
            continue
        E = Ellipsoid(Sv)
        KE = map_ellipsoid(Kv, E)
        score = sum(support_on_ellipsoid(a, E) / b for a, b in zip(X.A, bx))
        score += sum(support_on_ellipsoid(a, KE) / b for a, b in zip(U.A, bu))
        if score < best_score:
            best, best_score = RpiTube(E, Kv, float(lv)), score
    if best is None:
        detail = "no grid point solved" if worst is None else (
            f"best LMI margin {worst[1]:.3e} at lambda={worst[0]}")
        raise SynthesisError(f"RPI synthesis infeasible on the whole lambda grid ({detail})")
    logger.info("RPI tube: lambda=%.2f, normalised tightening %.4g", best.contraction, best_score)
    return best


def _shift_poly(P: Polytope, center) -> Polytope:
    return P if center is None else P.shifted(center)


def synth_terminal_cbf(A, B, X_tight: Polytope, U_tight: Polytope, *,
                       vertices=None, center=None, u_center=None,
                       contraction: float = 1.0, gamma_floor: float = 1e-6,
                       rescale: float = 0.99) -> TerminalCbf:
    """Maximum-volume invariant ellipsoid S_f inside ``X_tight`` whose
    linear policy stays in ``U_tight``; also sets gamma_f and rho.

    ``X_tight`` must already include the last-stage padding and the tube
    tightening. With ``contraction=1`` the invariance LMI is the plain
    Lyapunov condition; smaller values demand a strict contraction.
    """
    fam = _family(A, B, vertices)
    n, m = fam[0][1].shape
    Xs = _shift_poly(X_tight, center)
    Us = _shift_poly(U_tight, u_center)
    if np.any(Xs.b <= 0) or np.any(Us.b <= 0):
        raise SynthesisError("tightened constraint sets do not contain the terminal centre "
                             "in their interior (state/input family)")
    E = cp.Variable((n, n), PSD=True)
    Y = cp.Variable((m, n))
    cons = []
    for Ai, Bi in fam:
        AK = Ai @ E + Bi @ Y
        cons.append(_sym(cp.bmat([[contraction * E, AK.T], [AK, E]])) >> 0)
    for a, b in zip(Xs.A, Xs.b):
        aE = (a @ E)[None, :]
        cons.append(_sym(cp.bmat([[np.array([[b**2]]), aE], [aE.T, E]])) >> 0)
    for a, b in zip(Us.A, Us.b):
        aY = (a @ Y)[None, :]
        cons.append(_sym(cp.bmat([[np.array([[b**2]]), aY], [aY.T, E]])) >> 0)
    prob = cp.Problem(cp.Maximize(cp.log_det(E)), cons)
    try:
        prob.solve(solver=SDP_SOLVER)
    except cp.SolverError as exc:
        raise SynthesisError(f"terminal SDP failed: {exc}") from exc
    if prob.status not in ("optimal", "optimal_inaccurate") or E.value is None:
        raise SynthesisError(f"terminal SDP {prob.status}: invariance, state-inclusion or "
                             "input-inclusion LMIs cannot hold jointly")
    Ev = _sym(E.value)
    P = np.linalg.inv(Ev)
    K = Y.value @ P
    rho = max(_contraction_factor(Ai + Bi @ K, P) for Ai, Bi in fam)
    cbf = TerminalCbf(P, 0.0, K, rho, center, u_center)
    raw = _gamma_raw(cbf, X_tight, U_tight)
    if raw < gamma_floor:
        # S_f touches a constraint row: shrink it so that D_f has room
        cbf = TerminalCbf(P / rescale, 0.0, K, rho, center, u_center)
    gamma = compute_gamma_f(cbf, X_tight, U_tight, floor=gamma_floor)
    return cbf.with_gamma(gamma)


def _contraction_factor(AK, P) -> float:
    M = AK.T @ P @ AK
    return float(scipy.linalg.eigh(_sym(M), P, eigvals_only=True).max())


def _gamma_raw(cbf: TerminalCbf, X_tight: Polytope, U_tight: Polytope) -> float:
    Pinv = np.linalg.inv(cbf.P)
    Xs = X_tight.shifted(cbf.center)
    Us = U_tight.shifted(cbf.u_center)
    vals = [b**2 / (a @ Pinv @ a) - 1.0 for a, b in zip(Xs.A, Xs.b) if b > 0]
    if len(vals) < Xs.n_rows:
        return -np.inf
    for a, b in zip(Us.A, Us.b):
        ak = cbf.K.T @ a
        denom = ak @ Pinv @ ak
        if b <= 0:
            return -np.inf
        if denom > 0:
            vals.append(b**2 / denom - 1.0)
    return float(min(vals))


def compute_gamma_f(cbf: TerminalCbf, X_tight: Polytope, U_tight: Polytope,
                    floor: float = 1e-6) -> float:
    """Largest gamma with D_f inside ``X_tight`` and K_f D_f inside
    ``U_tight``. Raises if the terminal set already touches a constraint."""
    raw = _gamma_raw(cbf, X_tight, U_tight)
    if raw <= 0:
        raise SynthesisError(f"terminal set touches the constraints (gamma_f = {raw:.3e})")
    if raw < floor:
        raise SynthesisError(f"gamma_f = {raw:.3e} is below the floor {floor:g}")
    return raw


def verify_sf_containment(cbf: TerminalCbf, X_tight: Polytope, tol: float = 1e-9) -> bool:
    Pinv = np.linalg.inv(cbf.P)
    Xs = X_tight.shifted(cbf.center)
    return bool(all(np.sqrt(a @ Pinv @ a) <= b + tol for a, b in zip(Xs.A, Xs.b)))


@dataclass
class TerminalReport:
    n_samples: int
    n_safe: int
    n_domain: int
    invariance_violations: int
    decrease_violations: int
    input_violations: int
    worst_invariance: float
    worst_decrease: float
    worst_input: float
    witnesses: list = field(default_factory=list)

    @property
    def violations(self) -> int:
        return self.invariance_violations + self.decrease_violations + self.input_violations

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def raise_if_failed(self):
        if not self.passed:
            raise SynthesisError(
                f"terminal verification failed on {self.violations}/{self.n_samples} samples; "
                f"witness state {self.witnesses[0].tolist()}")


def sample_ellipsoid(P, level: float, n_samples: int, rng, center=None) -> np.ndarray:
    """Uniform samples from {z : (z-c)' P (z-c) <= level}."""
    n = P.shape[0]
    R = np.linalg.cholesky(P).T
    g = rng.standard_normal((n_samples, n))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = rng.random(n_samples) ** (1.0 / n)
    y = g * r[:, None] * np.sqrt(level)
    z = scipy.linalg.solve_triangular(R, y.T, lower=False).T
    return z if center is None else z + center


def verify_terminal(cbf: TerminalCbf, model: SystemModel, U_tight: Polytope,
                    n_samples: int = 100_000, seed: int = 0, tol: float = 1e-9) -> TerminalReport:
    """Sampled check of the barrier conditions of h_f under pi_f on D_f."""
    rng = np.random.default_rng(seed)
    Z = sample_ellipsoid(cbf.P, 1.0 + cbf.gamma_f, n_samples, rng, cbf.center)
    inv_v = dec_v = inp_v = 0
    worst_inv = worst_dec = worst_inp = -np.inf
    witnesses = []
    n_safe = 0
    for z in Z:
        hz = cbf.h(z)
        u = cbf.policy(z)
        hn = cbf.h(model.step(z, u))
        scale = tol * (1.0 + abs(hz))
        if hz <= 0:
            n_safe += 1
            m = hn
            worst_inv = max(worst_inv, m)
            if m > scale:
                inv_v += 1
                witnesses.append(z)
        else:
            m = (cbf.decrease(z)) - (hz - hn)
            worst_dec = max(worst_dec, m)
            if m > scale:
                dec_v += 1
                witnesses.append(z)
        mi = float(np.max(U_tight.residual(u)))
        worst_inp = max(worst_inp, mi)
        if mi > tol:
            inp_v += 1
            witnesses.append(z)
    return TerminalReport(n_samples, n_safe, n_samples - n_safe, inv_v, dec_v, inp_v,
                          worst_inv, worst_dec, worst_inp, witnesses[:5])


def verify_rpi(tube: RpiTube, A, B, W: DisturbanceBox, *, n_initial: int = 100,
               n_steps: int = 10_000, seed: int = 0, tol: float = 1e-6,
               disturbance_matrix=None) -> tuple[int, int]:
    """Monte-Carlo invariance of E under e+ = (A + B K) e + D w.

    Returns (contained, total) over all visited errors."""
    rng = np.random.default_rng(seed)
    n = tube.E.dim
    D = np.eye(n) if disturbance_matrix is None else np.asarray(disturbance_matrix)
    AK = np.asarray(A) + np.asarray(B) @ tube.K
    if tube.is_degenerate:
        e = np.zeros((n_initial, n))
    else:
        e = sample_ellipsoid(np.linalg.inv(tube.E.shape), 1.0, n_initial, rng)
    L, N = tube.E.factor() if not tube.is_degenerate else (np.zeros((0, n)), np.eye(n))
    ok = 0
    total = 0
    for _ in range(n_steps):
        w = rng.uniform(W.lower, W.upper, size=(n_initial, W.dim))
        e = e @ AK.T + w @ D.T
        inside = np.sum((e @ L.T) ** 2, axis=1) <= 1.0 + tol
        if N.shape[0]:
            inside &= np.all(np.abs(e @ N.T) <= tol, axis=1)
        ok += int(inside.sum())
        total += n_initial
    return ok, total


def verify_tube_sampled(tube: RpiTube, model: SystemModel, X_bar: Polytope, U_tight: Polytope,
                        W: DisturbanceBox, *, n_samples: int = 100_000, seed: int = 0,
                        tol: float = 1e-6, center=None, u_center=None) -> tuple[int, int]:
    """Sampled one-step invariance of E for the nonlinear error
    f(z+e, v+K e, w) - f(z, v, 0), with z drawn from the box hull of
    ``X_bar``, v from that of ``U_tight``, e from E and w from W.

    Returns (contained, total)."""
    rng = np.random.default_rng(seed)
    bx, bu = X_bar.box_bounds(), U_tight.box_bounds()
    if bx is None or bu is None:
        raise ValueError("sampled tube verification needs box-shaped sets")
    if tube.is_degenerate:
        return n_samples, n_samples
    Z = rng.uniform(bx[0], bx[1], size=(n_samples, model.n_x))
    V = rng.uniform(bu[0], bu[1], size=(n_samples, model.n_u))
    E = sample_ellipsoid(np.linalg.inv(tube.E.shape), 1.0, n_samples, rng)
    Wd = rng.uniform(W.lower, W.upper, size=(n_samples, W.dim))
    ok = 0
    for z, v, e, w in zip(Z, V, E, Wd):
        err = model.step(z + e, v + tube.K @ e, w) - model.step(z, v)
        ok += contains(tube.E, err, tol)
    return ok, n_samples
