"""Polytopes, ellipsoids and the support-function tightening used to
shrink state and input constraints by the error tube."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Polytope:
    """H-representation ``{x | A x <= b}``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float)).reshape(-1)
        if A.shape[0] != b.size or A.shape[0] < 1:
            raise ValueError("A must have one row per entry of b")
        if np.any(np.linalg.norm(A, axis=1) <= 0):
            raise ValueError("polytope rows must be nonzero")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def box(cls, lower, upper) -> "Polytope":
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        n = lower.size
        return cls(np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([upper, -lower]))

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def residual(self, x) -> np.ndarray:
        """Constraint function c(x) = A x - b (feasible iff all <= 0)."""
        return self.A @ np.asarray(x, dtype=float) - self.b

    def contains(self, x, tol: float = 0.0) -> bool:
        return bool(np.all(self.residual(x) <= tol))

    def shifted(self, center) -> "Polytope":
        """The set expressed in coordinates relative to ``center``."""
        return Polytope(self.A, self.b - self.A @ np.asarray(center, dtype=float))

    def box_bounds(self) -> tuple[np.ndarray, np.ndarray] | None:
        """(lower, upper) if the rows are signed unit vectors, else None."""
        n = self.dim
        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
        for a, b in zip(self.A, self.b):
            nz = np.flatnonzero(a)
            if nz.size != 1:
                return None
            j = nz[0]
            if a[j] > 0:
                hi[j] = min(hi[j], b / a[j])
            else:
                lo[j] = max(lo[j], b / a[j])
        return lo, hi


@dataclass(frozen=True)
class Ellipsoid:
    """Origin-centred ``{e | e' S^-1 e <= 1}``; ``S = 0`` encodes ``{0}``."""

    shape: np.ndarray

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.shape, dtype=float))
        if S.shape[0] != S.shape[1]:
            raise ValueError("ellipsoid shape must be square")
        if not np.allclose(S, S.T, atol=1e-10 * (1 + np.abs(S).max())):
            raise ValueError("ellipsoid shape must be symmetric")
        S = 0.5 * (S + S.T)
        if S.size and np.linalg.eigvalsh(S).min() < -1e-10 * (1 + np.abs(S).max()):
            raise ValueError("ellipsoid shape must be positive semidefinite")
        object.__setattr__(self, "shape", S)

    @classmethod
    def zero(cls, n: int) -> "Ellipsoid":
        return cls(np.zeros((n, n)))

    @classmethod
    def ball(cls, n: int, radius: float) -> "Ellipsoid":
        return cls(radius**2 * np.eye(n))

    @property
    def dim(self) -> int:
        return self.shape.shape[0]

    @property
    def is_degenerate(self) -> bool:
        return not np.any(self.shape)

    def support(self, a) -> float:
        return support_on_ellipsoid(a, self)

    def semi_axes(self) -> np.ndarray:
        return np.sqrt(np.clip(np.linalg.eigvalsh(self.shape), 0.0, None))

    def factor(self, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
        """(L, N) with L e the whitened error on the range of S and N e = 0
        the null-space equalities, so e in E iff ||L e|| <= 1 and N e = 0."""
        lam, U = np.linalg.eigh(self.shape)
        scale = max(1.0, float(np.abs(lam).max()) if lam.size else 1.0)
        rng = lam > tol * scale
        L = (U[:, rng] / np.sqrt(lam[rng])).T
        N = U[:, ~rng].T
        return L, N


def support_on_ellipsoid(a, E: Ellipsoid) -> float:
    a = np.asarray(a, dtype=float).reshape(-1)
    return float(np.sqrt(max(a @ E.shape @ a, 0.0)))


def tighten(P: Polytope, E: Ellipsoid, pad: float = 0.0) -> Polytope:
    """Rowwise Pontryagin difference ``(P shrunk by pad) - E``."""
    if pad < 0:
        raise ValueError("padding must be nonnegative")
    supp = np.array([support_on_ellipsoid(a, E) for a in P.A])
    b = P.b - pad - supp
    if np.any(b < -1e6 * max(1.0, np.abs(P.b).max())):
        logger.warning("tightened polytope has rows far below zero; the nominal set is empty")
    return Polytope(P.A, b)


def map_ellipsoid(K, E: Ellipsoid) -> Ellipsoid:
    """Image ``K E`` of the ellipsoid under a linear map."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    return Ellipsoid(K @ E.shape @ K.T)


def contains(E: Ellipsoid, e, tol: float = 1e-9) -> bool:
    """Membership ``e' S^+ e <= 1 + tol`` with an explicit range check."""
    e = np.asarray(e, dtype=float).reshape(-1)
    if E.is_degenerate:
        return bool(np.all(np.abs(e) <= tol))
    L, N = E.factor()
    if N.shape[0] and np.any(np.abs(N @ e) > tol * max(1.0, np.linalg.norm(e))):
        return False
    return bool(np.sum((L @ e) ** 2) <= 1.0 + tol)


@dataclass(frozen=True)
class PaddingSchedule:
    """Stagewise constraint padding, strictly increasing from zero."""

    deltas: np.ndarray

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.deltas, dtype=float))
        if d.size < 1 or d[0] != 0.0:
            raise ValueError("padding schedule must start at zero")
        if np.any(np.diff(d) <= 0):
            raise ValueError("padding schedule must be strictly increasing")
        object.__setattr__(self, "deltas", d)

    @classmethod
    def linear(cls, horizon: int, step: float = 1e-3) -> "PaddingSchedule":
        return cls(step * np.arange(horizon))

    def __len__(self):
        return self.deltas.size

    def __getitem__(self, i):
        return self.deltas[i]
