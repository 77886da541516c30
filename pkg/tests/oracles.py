"""Independent reference solutions for the scalar integrator instance.

Everything here is built from scipy's HiGHS LP solver plus a golden
section search over the terminal position z_2, so it shares no code with
the cvxpy programs under test. Data of the instance: X = U = [-1, 1], tube radius
0.1, tightened bounds 0.9 - Delta_i, S_f = {4 z^2 <= 1}, N = 2.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linprog

ALPHA_F = 1e6
TUBE = 0.1
U_MAX = 0.9
STAGE_B = (0.9, 0.9 - 1e-3)
P_TERM = 4.0

# variable order: z0, v0, v1, s0+, s0-, s1+, s1-, a0, a1
NV = 9
Z0, V0, V1, S0P, S0M, S1P, S1M, A0, A1 = range(NV)


def _rows(x, r, stage_fixed=None):
    A, b = [], []

    def le(coefs, rhs):
        row = np.zeros(NV)
        for j, c in coefs:
            row[j] += c
        A.append(row)
        b.append(rhs)

    le([(Z0, -1)], TUBE - x)
    le([(Z0, 1)], TUBE + x)
    z1 = [(Z0, 1), (V0, 1)]
    z2 = z1 + [(V1, 1)]
    le([(Z0, 1), (S0P, -1)], STAGE_B[0])
    le([(Z0, -1), (S0M, -1)], STAGE_B[0])
    le(z1 + [(S1P, -1)], STAGE_B[1])
    le([(j, -c) for j, c in z1] + [(S1M, -1)], STAGE_B[1])
    le(z2, r)
    le([(j, -c) for j, c in z2], r)
    for v, a in ((V0, A0), (V1, A1)):
        le([(v, 1), (a, -1)], 0.0)
        le([(v, -1), (a, -1)], 0.0)
    bounds = [(None, None), (-U_MAX, U_MAX), (-U_MAX, U_MAX)]
    if stage_fixed is None:
        bounds += [(0, None)] * 4
    else:
        bounds += [(s, s) for s in stage_fixed]
    bounds += [(0, None)] * 2
    return np.array(A), np.array(b), bounds


def _radius(t):
    return np.sqrt((1.0 + t) / P_TERM)


def _lp(c, A, b, bounds, A_extra=None, b_extra=None):
    if A_extra is not None:
        A, b = np.vstack([A, A_extra]), np.concatenate([b, b_extra])
    res = linprog(c, A_ub=A, b_ub=b, bounds=bounds, method="highs")
    return res.fun if res.status == 0 else np.inf


_SLACKS = np.zeros(NV)
_SLACKS[[S0P, S0M, S1P, S1M]] = 1.0
_FUEL = np.zeros(NV)
_FUEL[[A0, A1]] = 1.0


def slack_min(x: float) -> float:
    """h(x): least alpha_f * xi_N + sum of stage slacks."""
    lo, hi = _reachable(x)
    return min(_barrier(x, z) for z in _barrier_argmins(x, lo, hi))


def fixed_fuel(x: float, stage: np.ndarray, terminal: float) -> float:
    """Least fuel with the per-row slacks held at the given values."""
    A, b, bnd = _rows(x, _radius(terminal))
    # slack variables are pinned, but only as upper allowances
    bnd = bnd[:3] + [(0, s) for s in np.asarray(stage).ravel()] + bnd[7:]
    return _lp(_FUEL, A, b, bnd)


def _pinned(x, zeta):
    """Rows with the terminal position pinned at zeta (as a zero-width band)."""
    A, b, bnd = _rows(x, 0.0)
    b = b.copy()
    # the two terminal rows read z2 <= r and -z2 <= r; pin z2 = zeta instead
    b[6], b[7] = zeta, -zeta
    return A, b, bnd


def _reachable(x):
    c = np.zeros(NV)
    c[[Z0, V0, V1]] = 1.0
    A, b, bnd = _rows(x, np.inf)
    keep = np.isfinite(b)
    A, b = A[keep], b[keep]
    lo = linprog(c, A_ub=A, b_ub=b, bounds=bnd, method="highs").fun
    hi = -linprog(-c, A_ub=A, b_ub=b, bounds=bnd, method="highs").fun
    return lo, hi


GOLD = (np.sqrt(5.0) - 1.0) / 2.0


def _golden(f, lo, hi, feasible_at=None, tol=1e-10):
    """Minimum of a convex extended-valued function on [lo, hi].

    ``feasible_at`` is a point where f is finite; it decides which side to
    keep when both probes are infeasible. Returns (value, argmin)."""
    best = (f(feasible_at), feasible_at) if feasible_at is not None else (np.inf, None)
    m1, m2 = hi - GOLD * (hi - lo), lo + GOLD * (hi - lo)
    f1, f2 = f(m1), f(m2)
    while hi - lo > tol * max(1.0, abs(lo), abs(hi)):
        best = min(best, (f1, m1), (f2, m2), key=lambda t: t[0])
        both_out = np.isinf(f1) and np.isinf(f2)
        if both_out and feasible_at is None:
            break
        go_left = (feasible_at <= m2) if both_out else (f1 <= f2 and not np.isinf(f1))
        if both_out and m1 < feasible_at < m2:
            lo, hi = m1, m2
            m1, m2 = hi - GOLD * (hi - lo), lo + GOLD * (hi - lo)
            f1, f2 = f(m1), f(m2)
        elif go_left:
            hi, m2, f2 = m2, m1, f1
            m1 = hi - GOLD * (hi - lo)
            f1 = f(m1)
        else:
            lo, m1, f1 = m1, m2, f2
            m2 = lo + GOLD * (hi - lo)
            f2 = f(m2)
    return min(best, (f1, m1), (f2, m2), key=lambda t: t[0])


def _term(zeta):
    # evaluated exactly; routing it through the LP would scale the LP's
    # feasibility tolerance by alpha_f
    return ALPHA_F * max(0.0, P_TERM * zeta * zeta - 1.0)


def _barrier(x, zeta):
    A, b, bnd = _pinned(x, zeta)
    return _term(zeta) + _lp(_SLACKS, A, b, bnd)


def _barrier_argmins(x, lo, hi):
    """Candidate minimisers of the (convex) barrier over the terminal position."""
    _, arg = _golden(lambda z: _barrier(x, z), lo, hi)
    return [min(max(0.0, lo), hi), arg]


def bounded_fuel(x: float, bound: float, relax: float = 1e-7) -> float:
    """Least fuel with alpha_f * xi_N + sum(xi) <= bound * (1 + relax).

    The bound equals h(x) at the first step, where the feasible set is a
    single point; ``relax`` matches the relative relaxation the programs
    apply so both solve the same problem."""
    lo, hi = _reachable(x)
    bound = bound + relax * (1.0 + abs(bound))

    def fuel(zeta):
        budget = bound - _term(zeta)
        if budget < 0:
            return np.inf
        A, b, bnd = _pinned(x, zeta)
        return _lp(_FUEL, A, b, bnd, _SLACKS[None, :].copy(), np.array([budget]))

    p = min(_barrier_argmins(x, lo, hi), key=lambda z: _barrier(x, z))
    return _golden(fuel, lo, hi, feasible_at=p)[0]
