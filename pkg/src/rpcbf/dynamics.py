"""Discrete-time system models: the CWH rendezvous model, the kinematic
bicycle used for the lane change, and generic linear models."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class DisturbanceBox:
    """Axis-aligned disturbance set ``lower <= w <= upper``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimensionError("disturbance bounds must be vectors of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("disturbance bounds must be finite")
        if np.any(lo > 0) or np.any(hi < 0):
            raise ValueError("disturbance box must contain the origin")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, half_width) -> "DisturbanceBox":
        hw = np.abs(np.atleast_1d(np.asarray(half_width, dtype=float)))
        return cls(-hw, hw)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def is_zero(self) -> bool:
        return bool(np.all(self.lower == 0) and np.all(self.upper == 0))

    @property
    def max_abs(self) -> np.ndarray:
        return np.maximum(-self.lower, self.upper)

    def vertices(self) -> np.ndarray:
        active = np.flatnonzero(self.upper > self.lower)
        n_v = 1 << active.size
        out = np.zeros((n_v, self.dim))
        for k in range(n_v):
            for j, idx in enumerate(active):
                out[k, idx] = self.upper[idx] if (k >> j) & 1 else self.lower[idx]
        return out

    def contains(self, w, tol: float = 1e-12) -> bool:
        w = np.asarray(w, dtype=float)
        return bool(np.all(w >= self.lower - tol) and np.all(w <= self.upper + tol))


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Base class for x+ = f(x, u, w).

    Subclasses implement ``_f`` (the disturbance-free map) and ``_jac``.
    The disturbance enters additively through ``disturbance_matrix``.
    """

    n_x: int
    n_u: int
    is_linear: bool = field(default=False, init=False)

    @property
    def name(self) -> str:
        return type(self).__name__

    def params(self) -> dict:
        return {}

    def digest(self) -> str:
        payload = json.dumps({"name": self.name, **self.params()}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    @property
    def disturbance_matrix(self) -> np.ndarray:
        return np.eye(self.n_x)

    def _check(self, z, v, w=None):
        z = np.asarray(z, dtype=float).reshape(-1)
        v = np.asarray(v, dtype=float).reshape(-1)
        if z.size != self.n_x:
            raise DimensionError(f"state has dimension {z.size}, expected {self.n_x}")
        if v.size != self.n_u:
            raise DimensionError(f"input has dimension {v.size}, expected {self.n_u}")
        if w is None:
            return z, v, None
        w = np.asarray(w, dtype=float).reshape(-1)
        if w.size != self.n_x:
            raise DimensionError(f"disturbance has dimension {w.size}, expected {self.n_x}")
        return z, v, w

    def step(self, z, v, w=None) -> np.ndarray:
        z, v, w = self._check(z, v, w)
        out = self._f(z, v)
        if w is not None:
            out = out + self.disturbance_matrix @ w
        return out

    def jacobians(self, z, v) -> tuple[np.ndarray, np.ndarray]:
        z, v, _ = self._check(z, v)
        return self._jac(z, v)

    def _f(self, z, v):
        raise NotImplementedError

    def _jac(self, z, v):
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class LinearModel(SystemModel):
    A: np.ndarray = None
    B: np.ndarray = None
    label: str = "linear"

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if A.shape != (self.n_x, self.n_x) or B.shape != (self.n_x, self.n_u):
            raise DimensionError("A must be n_x x n_x and B must be n_x x n_u")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "is_linear", True)

    @classmethod
    def from_matrices(cls, A, B, label: str = "linear") -> "LinearModel":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        return cls(n_x=A.shape[0], n_u=B.shape[1], A=A, B=B, label=label)

    @property
    def name(self) -> str:
        return self.label

    def params(self) -> dict:
        return {"A": self.A.tolist(), "B": self.B.tolist()}

    def _f(self, z, v):
        return self.A @ z + self.B @ v

    def _jac(self, z, v):
        return self.A.copy(), self.B.copy()


@dataclass(frozen=True, eq=False)
class BicycleModel(SystemModel):
    """Euler-discretised kinematic bicycle, state (p_y, psi, v, delta),
    input (steering change, acceleration). The disturbance acts on the
    heading row only."""

    wheelbase: float = 0.09
    ts: float = 0.05

    def __post_init__(self):
        if self.wheelbase <= 0 or self.ts <= 0:
            raise ValueError("wheelbase and sampling time must be positive")

    @property
    def name(self) -> str:
        return "bicycle"

    def params(self) -> dict:
        return {"wheelbase": self.wheelbase, "ts": self.ts}

    @property
    def disturbance_matrix(self) -> np.ndarray:
        D = np.zeros((4, 4))
        D[1, 1] = 1.0
        return D

    def _f(self, z, v):
        py, psi, vel, delta = z
        d_delta, tau = v
        ts, l = self.ts, self.wheelbase
        return np.array([
            py + ts * vel * np.sin(psi),
            psi + ts * vel / l * np.tan(delta),
            vel + ts * tau,
            delta + d_delta,
        ])

    def _jac(self, z, v):
        _, psi, vel, delta = z
        ts, l = self.ts, self.wheelbase
        A = np.eye(4)
        A[0, 1] = ts * vel * np.cos(psi)
        A[0, 2] = ts * np.sin(psi)
        A[1, 2] = ts * np.tan(delta) / l
        A[1, 3] = ts * vel / (l * np.cos(delta) ** 2)
        B = np.zeros((4, 2))
        B[2, 1] = ts
        B[3, 0] = 1.0
        return A, B


def step_nominal(model: SystemModel, z, v) -> np.ndarray:
    return model.step(z, v)


def step_true(model: SystemModel, x, u, w) -> np.ndarray:
    return model.step(x, u, w)


def linearize(model: SystemModel, z, v) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians (A, B) of the disturbance-free map at (z, v)."""
    return model.jacobians(z, v)


def cwh_matrices(n_orbit: float, ts: float) -> tuple[np.ndarray, np.ndarray]:
    """Continuous-time Clohessy-Wiltshire-Hill matrices for the state
    (p_x, p_y, p_z, v_x, v_y, v_z) and acceleration input."""
    n = n_orbit
    Ac = np.zeros((6, 6))
    Ac[0:3, 3:6] = np.eye(3)
    Ac[3, 0] = 3.0 * n**2
    Ac[3, 4] = 2.0 * n
    Ac[4, 3] = -2.0 * n
    Ac[5, 2] = -(n**2)
    Bc = np.zeros((6, 3))
    Bc[3:6, :] = np.eye(3)
    return Ac, Bc


def cwh_model(n_orbit: float, ts: float) -> LinearModel:
    """Zero-order-hold discretisation of the CWH equations."""
    if n_orbit <= 0 or ts <= 0:
        raise ValueError("orbital rate and sampling time must be positive")
    Ac, Bc = cwh_matrices(n_orbit, ts)
    M = np.zeros((9, 9))
    M[:6, :6] = Ac
    M[:6, 6:] = Bc
    Md = scipy.linalg.expm(M * ts)
    return LinearModel(n_x=6, n_u=3, A=Md[:6, :6], B=Md[:6, 6:], label="cwh")


def bicycle_model(wheelbase: float = 0.09, ts: float = 0.05) -> BicycleModel:
    return BicycleModel(n_x=4, n_u=2, wheelbase=wheelbase, ts=ts)


def integrator_model() -> LinearModel:
    """Scalar z+ = z + v."""
    return LinearModel(n_x=1, n_u=1, A=np.eye(1), B=np.eye(1), label="integrator")
