"""Closed-form operator actions on the product space ``R^n x L^2([-d, 0]; R^n)``.

Histories are stored as samples on ``M + 1`` uniform nodes of ``[-d, 0]``
with linear interpolation; integrals over the history use the trapezoidal
rule on those nodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .errors import DomainError
from .model import DelayMeasure, ProblemSpec


def mat_exp(t: float, a) -> np.ndarray:
    """``exp(t a)``; accepts a stack of times when ``t`` is an array."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    t = np.asarray(t, dtype=float)
    arg = t[..., None, None] * a
    if not np.any(arg):
        return np.broadcast_to(np.eye(a.shape[0]), arg.shape).copy()
    with np.errstate(over="ignore", invalid="ignore"):
        out = expm(arg)
    if not np.all(np.isfinite(out)):
        raise DomainError("matrix exponential overflow")
    return out


def _trapezoid_weights(count: int, step: float) -> np.ndarray:
    w = np.full(count, step)
    w[0] = w[-1] = 0.5 * step
    return w


@dataclass(frozen=True)
class AbstractState:
    """Element ``(x0, x1)`` of the lifted space; ``x1`` has shape ``(M + 1, n)``."""

    x0: np.ndarray
    x1: np.ndarray
    d: float

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        x1 = np.asarray(self.x1, dtype=float)
        if x1.ndim == 1:
            x1 = x1[:, None]
        if x1.shape[0] < 2:
            raise DomainError("history segment needs at least two grid nodes (M >= 1)")
        if x1.shape[1] != x0.shape[0]:
            raise DomainError("history dimension differs from x0")
        if not self.d > 0:
            raise DomainError("d must be positive")
        if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(x1))):
            raise DomainError("state has non-finite entries")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "x1", x1)

    @classmethod
    def from_function(cls, x0, fn: Callable, d: float, M: int = 256) -> "AbstractState":
        """Sample ``fn`` (vectorised over a 1-D array of times) on the grid."""
        grid = np.linspace(-d, 0.0, M + 1)
        vals = np.asarray(fn(grid), dtype=float).reshape(M + 1, -1)
        return cls(x0, vals, d)

    @classmethod
    def zeros(cls, n: int, d: float, M: int = 256) -> "AbstractState":
        return cls(np.zeros(n), np.zeros((M + 1, n)), d)

    @property
    def n(self) -> int:
        return self.x0.shape[0]

    @property
    def M(self) -> int:
        return self.x1.shape[0] - 1

    @property
    def step(self) -> float:
        return self.d / self.M

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(-self.d, 0.0, self.M + 1)

    def interp(self, xi) -> np.ndarray:
        """Linear interpolation of ``x1``; zero outside ``[-d, 0]``."""
        xi = np.asarray(xi, dtype=float)
        grid = self.grid
        out = np.stack([np.interp(xi, grid, self.x1[:, j], left=0.0, right=0.0)
                        for j in range(self.n)], axis=-1)
        return out

    def inner(self, other) -> float:
        """``<x, z>_H`` with the trapezoidal rule on the shared grid."""
        if other.x1.shape != self.x1.shape:
            raise DomainError("states live on different history grids")
        w = _trapezoid_weights(self.M + 1, self.step)
        return float(self.x0 @ other.x0 + np.sum(w[:, None] * self.x1 * other.x1))

    def norm(self) -> float:
        return float(np.sqrt(self.inner(self)))

    def __add__(self, other):
        return type(self)(self.x0 + other.x0, self.x1 + other.x1, self.d)

    def __sub__(self, other):
        return type(self)(self.x0 - other.x0, self.x1 - other.x1, self.d)

    def scale(self, c: float):
        return type(self)(c * self.x0, c * self.x1, self.d)


class AdjointVector(AbstractState):
    """Element ``(z0, z1)`` on which the adjoint semigroup acts."""

    @property
    def z0(self) -> np.ndarray:
        return self.x0

    @property
    def z1(self) -> np.ndarray:
        return self.x1


def _check_time(t: float) -> float:
    t = float(t)
    if not np.isfinite(t) or t < 0:
        raise DomainError(f"time must be finite and non-negative, got {t}")
    return t


def _history_integral(t: float, x: AbstractState, a0: np.ndarray) -> np.ndarray:
    """``int_{-min(t,d)}^0 e^{(t+s) a0} x1(s) ds`` by trapezoid on grid nodes."""
    lo = -min(t, x.d)
    if lo == 0.0:
        return np.zeros(x.n)
    grid = x.grid
    inner = grid[grid > lo + 1e-12 * x.d]
    nodes = np.concatenate([[lo], inner])
    vals = x.interp(nodes)
    h = np.diff(nodes)
    w = np.zeros(len(nodes))
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    if np.any(a0):
        exps = mat_exp(t + nodes, a0)
        vals = np.einsum("qij,qj->qi", exps, vals)
    return w @ vals


def apply_semigroup(t: float, x: AbstractState, a0) -> AbstractState:
    """``e^{tA} x``: evolve ``x0`` and transport the history to the right."""
    t = _check_time(t)
    a0 = np.atleast_2d(np.asarray(a0, dtype=float))
    if t == 0.0:
        return x
    first = mat_exp(t, a0) @ x.x0 + _history_integral(t, x, a0)
    grid = x.grid
    shifted = x.interp(grid - t)
    edge = -x.d + t
    shifted[grid < edge - 1e-12 * x.d] = 0.0
    # a jump on an interior node gets the mean of its one-sided limits; at the
    # right end only the inner limit (zero) is kept
    on_jump = np.abs(grid - edge) <= 1e-12 * x.d
    on_jump[0] = False
    shifted[on_jump] *= 0.0 if on_jump[-1] else 0.5
    return type(x)(first, shifted, x.d)


def reduced_coordinate(t: float, x: AbstractState, a0) -> np.ndarray:
    """First component of ``e^{tA} x``, the only statistic the value field needs."""
    t = _check_time(t)
    a0 = np.atleast_2d(np.asarray(a0, dtype=float))
    if t == 0.0:
        return x.x0.copy()
    return mat_exp(t, a0) @ x.x0 + _history_integral(t, x, a0)


def apply_adjoint_semigroup(t: float, z: AbstractState, a0) -> AbstractState:
    """``e^{tA*} z``; on ``[-t, 0]`` the segment is ``e^{(xi+t) a0^T} z0``."""
    t = _check_time(t)
    a0 = np.atleast_2d(np.asarray(a0, dtype=float))
    if t == 0.0:
        return z
    grid = z.grid
    new = np.zeros_like(z.x1)
    recent = grid >= -t - 1e-12 * z.d
    if np.any(recent):
        exps = mat_exp(grid[recent] + t, a0.T)
        new[recent] = exps @ z.x0
    old = ~recent
    if np.any(old):
        new[old] = z.interp(grid[old] + t)
    on_jump = np.abs(grid + t) <= 1e-12 * z.d
    on_jump[0] = False
    if np.any(on_jump):
        new[on_jump] = 0.5 * (z.x0 + z.x1[-1])
    return type(z)(mat_exp(t, a0.T) @ z.x0, new, z.d)


def apply_resolvent(N: float, x: AbstractState, a0) -> AbstractState:
    """``(N - A)^{-1} x`` for real ``N`` outside the spectrum of ``a0``."""
    a0 = np.atleast_2d(np.asarray(a0, dtype=float))
    n = a0.shape[0]
    shifted = N * np.eye(n) - a0
    if np.linalg.cond(shifted) > 1e13:
        raise DomainError(f"N = {N} is (numerically) an eigenvalue of a0")
    step = x.step
    decay = np.exp(-N * step)
    second = np.zeros_like(x.x1)
    for i in range(1, x.M + 1):
        second[i] = decay * second[i - 1] + 0.5 * step * (decay * x.x1[i - 1] + x.x1[i])
    first = np.linalg.solve(shifted, x.x0 + second[-1])
    return type(x)(first, second, x.d)


def apply_generator(x: AbstractState, a0) -> AbstractState:
    """``A x = (a0 x0 + x1(0), -x1')`` by finite differences (test helper)."""
    a0 = np.atleast_2d(np.asarray(a0, dtype=float))
    deriv = np.gradient(x.x1, x.step, axis=0, edge_order=2)
    return type(x)(a0 @ x.x0 + x.x1[-1], -deriv, x.d)


def etAB_0(t: float, spec: ProblemSpec) -> np.ndarray:
    """``(e^{tA} B)_0 = e^{t a0} b0 + int_{[-t, 0]} e^{(t+r) a0} b1(dr)``.

    The interval is closed, so an atom at ``-t`` or at ``0`` contributes.
    """
    t = _check_time(t)
    base = mat_exp(t, spec.a0) @ spec.b0
    if spec.b1.is_zero or t == 0.0 and not spec.b1.has_atoms:
        return base
    lo = max(-t, -spec.d)
    return base + spec.b1.integrate(lambda r: mat_exp(t + r, spec.a0), lo, 0.0)


def apply_B(u, spec: ProblemSpec):
    """``B u = (b0 u, b1(.) u)``; the second component is an ``n x 1`` measure."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    b1 = spec.b1
    vals = None if not b1.has_density else (b1.values @ u)[..., None]
    atoms = tuple((loc, (c @ u)[:, None]) for loc, c in b1.atoms)
    measure = DelayMeasure(d=b1.d, n=b1.n, m=1, breakpoints=b1.breakpoints,
                           values=vals, kind=b1.kind, atoms=atoms)
    return spec.b0 @ u, measure


def apply_Bstar(x0, x1, spec: ProblemSpec) -> np.ndarray:
    """``B* x = b0^T x0 + int b1(dxi)^T x1(xi)``.

    ``x1`` is a vectorised callable (times -> ``(q, n)``) or an
    :class:`AbstractState`, whose linear interpolant is used.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if isinstance(x1, AbstractState):
        seg = x1.interp
    elif callable(x1):
        seg = x1
    else:
        raise DomainError("x1 must be a continuous segment (callable or AbstractState)")

    def rows(r):
        vals = np.asarray(seg(np.asarray(r, dtype=float)), dtype=float).reshape(len(r), -1)
        if not np.all(np.isfinite(vals)):
            raise DomainError("history segment is not evaluable at a required point")
        return vals[:, None, :]

    hist = spec.b1.integrate(rows)[0]
    return spec.b0.T @ x0 + hist
