"""Current-value and minimised Hamiltonians with a deterministic argmin selection.

``H_CV(p; u) = p . u + l1(u)`` and ``H_min(p) = inf_{u in U} H_CV(p; u)``.
Where the argmin is unique, ``grad H_min(p) = gamma(p)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import DomainError, UnboundedHamiltonianError
from .model import (CallableControlCost, ControlSet, LinearControlCost, ProblemSpec,
                    QuadraticControlCost)

_N_STARTS = 8


@dataclass(frozen=True)
class HamiltonianSpec:
    """Control set, control cost and the closed form used to minimise over ``U``.

    ``closed_form`` is one of ``"quadratic"`` (diagonal weight on a box),
    ``"linear"`` (box), ``"finite"`` (enumeration) or ``None`` (numeric).
    """

    U: ControlSet
    l1: Callable
    closed_form: Optional[str] = None

    def __post_init__(self):
        form = self.closed_form
        if form is None:
            form = _detect_form(self.U, self.l1)
            object.__setattr__(self, "closed_form", form)
        if form == "quadratic" and not isinstance(self.l1, QuadraticControlCost):
            raise DomainError("closed_form='quadratic' requires a QuadraticControlCost")
        if self.U.kind == "box" and not self.U.compact:
            coercive = isinstance(self.l1, QuadraticControlCost)
            if not coercive:
                raise UnboundedHamiltonianError(
                    "non-compact control set with a non-coercive control cost")

    @classmethod
    def from_problem(cls, spec: ProblemSpec) -> "HamiltonianSpec":
        return cls(spec.U, spec.cost.control)

    @property
    def m(self) -> int:
        return self.U.m

    def h_cv(self, p, u) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        u = np.asarray(u, dtype=float)
        if not np.all(self.U.contains(u)):
            raise DomainError("control outside U")
        return np.sum(p * u, axis=-1) + np.asarray(self.l1(u), dtype=float)

    def gamma(self, p) -> np.ndarray:
        """Selected minimiser, same shape as ``p`` (``(..., m)``)."""
        p = np.asarray(p, dtype=float)
        form = self.closed_form
        if form == "quadratic":
            q = np.diag(self.l1.weight)
            return np.clip(-p / q, self.U.lo, self.U.hi)
        if form == "linear":
            slope = p + self.l1.alpha
            lo, hi = self.U.lo, self.U.hi
            tie = np.clip(0.0, lo, hi)
            out = np.where(slope > 0, lo, np.where(slope < 0, hi, tie))
            return np.broadcast_to(out, p.shape).astype(float)
        if form == "finite":
            return self._finite_argmin(p)
        flat = p.reshape(-1, self.m)
        out = np.array([self._numeric_argmin(row) for row in flat])
        return out.reshape(p.shape)

    def h_min(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if self.closed_form == "linear":
            slope = p + self.l1.alpha
            return (np.sum(np.minimum(slope * self.U.lo, slope * self.U.hi), axis=-1)
                    + self.l1.offset)
        u = self.gamma(p)
        return np.sum(p * u, axis=-1) + np.asarray(self.l1(u), dtype=float)

    def _finite_argmin(self, p):
        pts = self.U.points
        vals = p @ pts.T + np.asarray(self.l1(pts), dtype=float)
        best = vals.min(axis=-1, keepdims=True)
        tied = vals <= best + 1e-12 * (1.0 + np.abs(best))
        # tie-break: smallest norm, then lexicographic order
        keys = np.lexsort(tuple(pts[:, j] for j in range(pts.shape[1] - 1, -1, -1))
                          + (np.linalg.norm(pts, axis=1),))
        rank = np.empty(len(pts), dtype=int)
        rank[keys] = np.arange(len(pts))
        score = np.where(tied, rank, len(pts) + 1)
        return pts[np.argmin(score, axis=-1)]

    def _numeric_argmin(self, p):
        lo, hi = self.U.lo, self.U.hi
        m = len(lo)

        def objective(u):
            return float(p @ u + self.l1(u))

        best_u, best_v = None, np.inf
        fractions = np.linspace(0.0, 1.0, _N_STARTS)
        for frac in fractions:
            u = lo + frac * (hi - lo)
            prev = np.inf
            for _ in range(50):
                for i in range(m):
                    def coord(x, i=i, u=u):
                        v = u.copy()
                        v[i] = x
                        return objective(v)
                    if hi[i] > lo[i]:
                        res = minimize_scalar(coord, bounds=(lo[i], hi[i]), method="bounded",
                                              options={"xatol": 1e-12})
                        cand = [lo[i], hi[i], res.x]
                        vals = [coord(c) for c in cand]
                        u[i] = cand[int(np.argmin(vals))]
                cur = objective(u)
                if prev - cur <= 1e-14 * (1 + abs(cur)):
                    break
                prev = cur
            v = objective(u)
            better = v < best_v - 1e-12 * (1 + abs(v))
            tie = abs(v - best_v) <= 1e-12 * (1 + abs(v))
            if better or (tie and tuple(u) < tuple(best_u)):
                best_u, best_v = u.copy(), v
        return best_u


def _detect_form(U: ControlSet, l1) -> Optional[str]:
    if U.kind == "finite":
        return "finite"
    if isinstance(l1, QuadraticControlCost):
        w = l1.weight
        if np.allclose(w, np.diag(np.diag(w))):
            return "quadratic"
        if not U.compact:
            raise DomainError("non-diagonal quadratic cost needs a compact control set")
        return None
    if isinstance(l1, LinearControlCost):
        if not U.compact:
            raise UnboundedHamiltonianError("linear control cost on a non-compact control set")
        return "linear"
    if isinstance(l1, CallableControlCost) and not U.compact:
        raise UnboundedHamiltonianError("callable control cost needs a compact control set")
    return None


def lipschitz_audit(ham: HamiltonianSpec, n_points: int = 1000, p_range: float = 10.0):
    """Sampled Lipschitz constants of ``H_min`` and of ``gamma = grad H_min``.

    Difference quotients between axis-neighbours on a uniform grid of about
    ``n_points`` points in ``[-p_range, p_range]^m``.
    """
    m = ham.m
    per_axis = max(2, int(round(n_points ** (1.0 / m))))
    axis = np.linspace(-p_range, p_range, per_axis)
    grids = np.meshgrid(*([axis] * m), indexing="ij")
    pts = np.stack(grids, axis=-1)
    h = ham.h_min(pts)
    g = ham.gamma(pts)
    step = axis[1] - axis[0]
    L = 0.0
    Lg = 0.0
    for i in range(m):
        dh = np.abs(np.diff(h, axis=i)) / step
        dg = np.linalg.norm(np.diff(g, axis=i), axis=-1) / step
        L = max(L, float(dh.max()))
        Lg = max(Lg, float(dg.max()))
    return L, Lg
