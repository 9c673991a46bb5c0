"""Problem data for finite-horizon control of linear SDEs with delay in the control.

The controlled state equation is

    dy(t) = [a0 y(t) + b0 u(t) + int_{[-d,0]} b1(dxi) u(t + xi)] dt + sigma dW(t),
    y(0) = y0,   u(xi) = u0(xi) for xi in [-d, 0),

with cost ``E int_0^T [l0(s, y(s)) + l1(u(s))] ds + E phi(y(T))``.

Callables follow a vectorised contract: ``l0(t, y)`` and ``phi(y)`` receive
``y`` of shape ``(..., n)`` and return shape ``(...)``; ``l1(u)`` receives
``(..., m)``; ``u0(times)`` receives a 1-D array and returns ``(len, m)``.
Callables must be reentrant; all dataclasses here are frozen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, ValidationError

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


def _gauss_legendre(lo: float, hi: float):
    half = 0.5 * (hi - lo)
    return lo + half * (_GL_NODES + 1.0), half * _GL_WEIGHTS


# --------------------------------------------------------------------------
# delay measure


@dataclass(frozen=True)
class DelayMeasure:
    """Matrix-valued measure ``b1`` on ``[-d, 0]``: density plus Dirac atoms.

    The density is either piecewise constant (``values[i]`` on
    ``[breakpoints[i], breakpoints[i+1])``) or sampled (``values[i]`` at
    ``breakpoints[i]``, linear in between). Atoms are ``(location, C)`` with
    ``C`` an ``n x m`` matrix.
    """

    d: float
    n: int
    m: int
    breakpoints: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    kind: str = "piecewise_constant"
    atoms: tuple = ()

    def __post_init__(self):
        if not self.d > 0:
            raise ValidationError("delay horizon d must be positive")
        if self.kind not in ("piecewise_constant", "sampled"):
            raise ValidationError(f"unknown density kind {self.kind!r}")
        if self.breakpoints is not None:
            bp = np.asarray(self.breakpoints, dtype=float)
            vals = np.asarray(self.values, dtype=float)
            if bp.ndim != 1 or len(bp) < 2 or np.any(np.diff(bp) <= 0):
                raise ValidationError("density breakpoints must be strictly increasing")
            if not (np.isclose(bp[0], -self.d) and np.isclose(bp[-1], 0.0)):
                raise ValidationError("density breakpoints must cover exactly [-d, 0]")
            expected = len(bp) - 1 if self.kind == "piecewise_constant" else len(bp)
            vals = vals.reshape(expected, self.n, self.m)
            if not np.all(np.isfinite(vals)):
                raise ValidationError("density values must be finite")
            object.__setattr__(self, "breakpoints", bp)
            object.__setattr__(self, "values", vals)
        atoms = []
        for loc, weight in self.atoms:
            loc = float(loc)
            if loc < -self.d - 1e-12 or loc > 1e-12:
                raise ValidationError(f"atom location {loc} outside [-d, 0]")
            weight = np.asarray(weight, dtype=float).reshape(self.n, self.m)
            atoms.append((min(max(loc, -self.d), 0.0), weight))
        object.__setattr__(self, "atoms", tuple(atoms))

    # constructors -----------------------------------------------------------

    @classmethod
    def zero(cls, d: float, n: int, m: int) -> "DelayMeasure":
        return cls(d=d, n=n, m=m)

    @classmethod
    def constant(cls, d: float, value, atoms=()) -> "DelayMeasure":
        value = np.atleast_2d(np.asarray(value, dtype=float))
        n, m = value.shape
        return cls(d=d, n=n, m=m, breakpoints=np.array([-d, 0.0]),
                   values=value[None], atoms=tuple(atoms))

    @classmethod
    def dirac(cls, d: float, location: float, weight) -> "DelayMeasure":
        weight = np.atleast_2d(np.asarray(weight, dtype=float))
        n, m = weight.shape
        return cls(d=d, n=n, m=m, atoms=((location, weight),))

    # evaluation ------------------------------------------------------------

    @property
    def has_density(self) -> bool:
        return self.breakpoints is not None

    @property
    def has_atoms(self) -> bool:
        return len(self.atoms) > 0

    @property
    def is_zero(self) -> bool:
        dens_zero = not self.has_density or not np.any(self.values)
        return dens_zero and all(not np.any(c) for _, c in self.atoms)

    def density(self, xi) -> np.ndarray:
        """Density at ``xi`` (any shape); returns ``xi.shape + (n, m)``."""
        xi = np.asarray(xi, dtype=float)
        out = np.zeros(xi.shape + (self.n, self.m))
        if not self.has_density:
            return out
        inside = (xi >= -self.d - 1e-14) & (xi <= 1e-14)
        bp = self.breakpoints
        if self.kind == "piecewise_constant":
            idx = np.clip(np.searchsorted(bp, xi, side="right") - 1, 0, len(bp) - 2)
            out[...] = self.values[idx]
        else:
            idx = np.clip(np.searchsorted(bp, xi, side="right") - 1, 0, len(bp) - 2)
            w = ((xi - bp[idx]) / (bp[idx + 1] - bp[idx]))[..., None, None]
            out[...] = (1 - w) * self.values[idx] + w * self.values[idx + 1]
        out[~inside] = 0.0
        return out

    def pieces(self, lo: float = None, hi: float = None) -> list[tuple[float, float]]:
        """Sub-intervals of ``[lo, hi]`` on which the density is smooth."""
        lo = -self.d if lo is None else lo
        hi = 0.0 if hi is None else hi
        if hi <= lo or not self.has_density:
            return []
        cuts = [lo] + [b for b in self.breakpoints if lo < b < hi] + [hi]
        return list(zip(cuts[:-1], cuts[1:]))

    def integrate(self, func: Callable[[np.ndarray], np.ndarray], lo: float = None,
                  hi: float = None) -> np.ndarray:
        """``int_{[lo, hi]} func(r) b1(dr)`` for matrix-valued ``func``.

        ``func`` maps an array of points ``(q,)`` to ``(q, p, n)``; the result
        is ``(p, m)``. The interval is closed: atoms sitting exactly on either
        end are included.
        """
        lo = -self.d if lo is None else lo
        hi = 0.0 if hi is None else hi
        total = None
        for a, b in self.pieces(lo, hi):
            r, w = _gauss_legendre(a, b)
            vals = np.einsum("q,qpn,qnm->pm", w, func(r), self.density(r))
            total = vals if total is None else total + vals
        tol = 1e-12 * max(1.0, self.d)
        for loc, weight in self.atoms:
            if lo - tol <= loc <= hi + tol:
                val = func(np.array([loc]))[0] @ weight
                total = val if total is None else total + val
        if total is None:
            probe = func(np.array([0.0]))
            total = np.zeros((probe.shape[1], self.m))
        return total

    def total(self) -> np.ndarray:
        """Total mass ``b1([-d, 0])`` as an ``n x m`` matrix."""
        eye = np.eye(self.n)
        return self.integrate(lambda r: np.broadcast_to(eye, (len(r), self.n, self.n)))

    def l2_norm(self) -> float:
        """L2 norm of the density part (atoms excluded)."""
        acc = 0.0
        for a, b in self.pieces():
            r, w = _gauss_legendre(a, b)
            acc += float(np.sum(w * np.sum(self.density(r) ** 2, axis=(1, 2))))
        return float(np.sqrt(acc))

    def tv_mass(self) -> float:
        """Total variation mass using the spectral norm of each matrix."""
        acc = 0.0
        for a, b in self.pieces():
            r, w = _gauss_legendre(a, b)
            acc += float(np.sum(w * np.linalg.norm(self.density(r), ord=2, axis=(1, 2))))
        acc += sum(float(np.linalg.norm(c, 2)) for _, c in self.atoms)
        return acc

    def density_samples(self, num: int = 64) -> np.ndarray:
        """Density at the piece midpoints and a uniform grid, for image tests."""
        if not self.has_density:
            return np.zeros((0, self.n, self.m))
        mids = 0.5 * (self.breakpoints[:-1] + self.breakpoints[1:])
        grid = np.linspace(-self.d, 0.0, num)
        return self.density(np.concatenate([mids, grid, self.breakpoints]))


# --------------------------------------------------------------------------
# control set and control costs


@dataclass(frozen=True)
class ControlSet:
    """Closed control set: a box ``[lo, hi]`` or a finite list of points."""

    kind: str
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    points: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == "box":
            lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
            hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
            if lo.shape != hi.shape or np.any(lo > hi):
                raise ValidationError("box requires lo <= hi componentwise")
            object.__setattr__(self, "lo", lo)
            object.__setattr__(self, "hi", hi)
        elif self.kind == "finite":
            pts = np.asarray(self.points, dtype=float)
            if pts.ndim == 1:
                pts = pts[:, None]
            if len(pts) == 0:
                raise ValidationError("finite control set must be nonempty")
            object.__setattr__(self, "points", pts)
        else:
            raise ValidationError(f"unknown control set kind {self.kind!r}")

    @classmethod
    def box(cls, lo, hi) -> "ControlSet":
        return cls("box", lo=lo, hi=hi)

    @classmethod
    def finite(cls, points) -> "ControlSet":
        return cls("finite", points=points)

    @property
    def m(self) -> int:
        return len(self.lo) if self.kind == "box" else self.points.shape[1]

    @property
    def compact(self) -> bool:
        if self.kind == "finite":
            return True
        return bool(np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi)))

    def radius(self) -> float:
        """``sup_{u in U} |u|`` (infinite for unbounded boxes)."""
        if self.kind == "finite":
            return float(np.max(np.linalg.norm(self.points, axis=1)))
        corner = np.maximum(np.abs(self.lo), np.abs(self.hi))
        return float(np.linalg.norm(corner))

    def contains(self, u, tol: float = 1e-12) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return np.all((u >= self.lo - tol) & (u <= self.hi + tol), axis=-1)
        dist = np.linalg.norm(u[..., None, :] - self.points, axis=-1)
        return np.any(dist <= tol, axis=-1)

    def project(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return np.clip(u, self.lo, self.hi)
        dist = np.linalg.norm(u[..., None, :] - self.points, axis=-1)
        return self.points[np.argmin(dist, axis=-1)]

    def sample(self, num: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "finite":
            return self.points[rng.integers(0, len(self.points), size=num)]
        lo = np.where(np.isfinite(self.lo), self.lo, -10.0)
        hi = np.where(np.isfinite(self.hi), self.hi, 10.0)
        return rng.uniform(lo, hi, size=(num, len(lo)))


@dataclass(frozen=True)
class QuadraticControlCost:
    """``l1(u) = 0.5 u^T Q u + offset`` with ``Q`` symmetric positive definite."""

    weight: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.weight, dtype=float))
        if q.shape[0] != q.shape[1] or not np.allclose(q, q.T):
            raise ValidationError("quadratic control weight must be symmetric")
        if np.min(np.linalg.eigvalsh(q)) <= 0:
            raise ValidationError("quadratic control weight must be positive definite")
        object.__setattr__(self, "weight", q)

    @property
    def lower_bound(self) -> float:
        return float(self.offset)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", u, self.weight, u) + self.offset


@dataclass(frozen=True)
class LinearControlCost:
    """``l1(u) = alpha . u + offset``; bounded below only on compact sets."""

    alpha: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.atleast_1d(np.asarray(self.alpha, dtype=float)))

    @property
    def lower_bound(self) -> float:
        return -np.inf

    def __call__(self, u):
        return np.asarray(u, dtype=float) @ self.alpha + self.offset


@dataclass(frozen=True)
class CallableControlCost:
    """User control cost with a declared lower bound."""

    fn: Callable
    lower_bound: float = -np.inf

    def __call__(self, u):
        return np.asarray(self.fn(np.asarray(u, dtype=float)), dtype=float)


def numeric_gradient(fn: Callable, y, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a vectorised ``fn(y)``; shape ``y.shape``."""
    y = np.asarray(y, dtype=float)
    n = y.shape[-1]
    grad = np.empty_like(y)
    for i in range(n):
        step = np.zeros(n)
        step[i] = h * max(1.0, 1.0)
        grad[..., i] = (fn(y + step) - fn(y - step)) / (2 * h)
    return grad


def _zero_running(t, y):
    return np.zeros(np.shape(y)[:-1])


@dataclass(frozen=True)
class CostSpec:
    """Running, control and terminal costs with declared bounds.

    ``running_bound`` / ``terminal_bound`` are sup-norm bounds when the costs
    are bounded; otherwise ``*_growth`` gives a polynomial growth degree.
    Gradients are optional and fall back to central differences.
    """

    control: Callable
    terminal: Callable
    running: Callable = _zero_running
    running_bound: Optional[float] = 0.0
    running_growth: Optional[int] = None
    running_grad: Optional[Callable] = None
    running_spatially_constant: bool = True
    terminal_bound: Optional[float] = None
    terminal_growth: Optional[int] = None
    terminal_grad: Optional[Callable] = None

    def terminal_gradient(self, y):
        if self.terminal_grad is not None:
            return np.asarray(self.terminal_grad(y), dtype=float)
        return numeric_gradient(self.terminal, y)

    def running_gradient(self, t, y):
        if self.running_grad is not None:
            return np.asarray(self.running_grad(t, y), dtype=float)
        return numeric_gradient(lambda z: self.running(t, z), y)


# --------------------------------------------------------------------------
# problem specification


def _constant_history(value, m):
    value = np.broadcast_to(np.asarray(value, dtype=float), (m,)).copy()

    def u0(times):
        times = np.atleast_1d(np.asarray(times, dtype=float))
        return np.broadcast_to(value, (len(times), m)).copy()

    return u0


@dataclass(frozen=True)
class ProblemSpec:
    """Full model data.

    Parameters
    ----------
    a0, b0, sigma : array_like
        ``n x n``, ``n x m`` and ``n x k`` coefficient matrices.
    b1 : DelayMeasure
        Delay measure acting on the control history.
    d, T : float
        Maximal delay and horizon.
    U : ControlSet
    cost : CostSpec
    y0 : array_like
        Initial state.
    u0 : callable or array_like
        Control history on ``[-d, 0)``; a constant vector is accepted.
    """

    a0: np.ndarray
    b0: np.ndarray
    sigma: np.ndarray
    b1: DelayMeasure
    d: float
    T: float
    U: ControlSet
    cost: CostSpec
    y0: np.ndarray
    u0: Callable = None
    name: str = "problem"

    def __post_init__(self):
        a0 = np.atleast_2d(np.asarray(self.a0, dtype=float))
        b0 = np.atleast_2d(np.asarray(self.b0, dtype=float))
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        n = a0.shape[0]
        if a0.shape != (n, n):
            raise ValidationError(f"a0 must be square, got {a0.shape}")
        if b0.shape[0] != n:
            raise ValidationError(f"b0 must have {n} rows, got {b0.shape}")
        if sigma.shape[0] != n:
            raise ValidationError(f"sigma must have {n} rows, got {sigma.shape}")
        m = b0.shape[1]
        if (self.b1.n, self.b1.m) != (n, m):
            raise ValidationError("delay measure dimensions do not match (n, m)")
        if not np.isclose(self.b1.d, self.d):
            raise ValidationError("delay measure horizon differs from d")
        if not self.d > 0 or not self.T > 0:
            raise ValidationError("d and T must be positive")
        if self.U.m != m:
            raise ValidationError("control set dimension differs from m")
        y0 = np.atleast_1d(np.asarray(self.y0, dtype=float))
        if y0.shape != (n,):
            raise ValidationError(f"y0 must have shape ({n},)")
        for name, mat in (("a0", a0), ("b0", b0), ("sigma", sigma)):
            if not np.all(np.isfinite(mat)):
                raise ValidationError(f"{name} has non-finite entries")
        u0 = self.u0
        if u0 is None:
            u0 = _constant_history(0.0, m)
        elif not callable(u0):
            u0 = _constant_history(u0, m)
        for key, val in (("a0", a0), ("b0", b0), ("sigma", sigma), ("y0", y0), ("u0", u0)):
            object.__setattr__(self, key, val)

    @property
    def n(self) -> int:
        return self.a0.shape[0]

    @property
    def m(self) -> int:
        return self.b0.shape[1]

    @property
    def k(self) -> int:
        return self.sigma.shape[1]

    def history(self, times) -> np.ndarray:
        """Evaluate ``u0`` at ``times`` (shape ``(q,)``) -> ``(q, m)``."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if np.any(times < -self.d - 1e-12) or np.any(times > 1e-12):
            raise DomainError("control history queried outside [-d, 0]")
        try:
            vals = np.asarray(self.u0(times), dtype=float)
        except Exception as exc:  # user callable failed
            raise DomainError(f"control history undefined: {exc}") from exc
        vals = np.broadcast_to(vals.reshape(len(times), -1), (len(times), self.m))
        if not np.all(np.isfinite(vals)):
            raise DomainError("control history is not finite at required lookback points")
        return vals

    def replace(self, **changes) -> "ProblemSpec":
        from dataclasses import replace
        return replace(self, **changes)


# --------------------------------------------------------------------------
# lifting and hypothesis checks


def lift_initial(spec: ProblemSpec, M: int = 256):
    """Lift ``(y0, u0)`` to the product-space state ``(y0, x1)``.

    ``x1(xi) = int_{[-d, xi]} b1(dzeta) u0(zeta - xi)`` sampled on ``M + 1``
    uniform nodes of ``[-d, 0]``.
    """
    from .operators import AbstractState

    grid = np.linspace(-spec.d, 0.0, M + 1)
    x1 = np.zeros((M + 1, spec.n))
    if not spec.b1.is_zero:
        for i, xi in enumerate(grid):
            def integrand(r, xi=xi):
                u = spec.history(np.clip(r - xi, -spec.d, 0.0))
                # shape (q, 1, m): the row vector is contracted against b1
                return u[:, None, :]

            # b1(dzeta) u = sum_j b1[:, j] u_j; build via columns
            x1[i] = _apply_measure_to_history(spec, integrand, xi)
    return AbstractState(np.array(spec.y0, dtype=float), x1, spec.d)


def _apply_measure_to_history(spec: ProblemSpec, hist, xi: float) -> np.ndarray:
    """``int_{[-d, xi]} b1(dzeta) u(zeta)`` where ``hist(r)`` is ``(q, 1, m)``."""
    out = np.zeros(spec.n)
    b1 = spec.b1
    for a, b in b1.pieces(-spec.d, xi):
        r, w = _gauss_legendre(a, b)
        out += np.einsum("q,qnm,qm->n", w, b1.density(r), hist(r)[:, 0, :])
    for loc, weight in b1.atoms:
        if loc <= xi + 1e-12:
            out += weight @ hist(np.array([loc]))[0, 0]
    return out


@dataclass
class HypothesisReport:
    """Outcome of :func:`check_hypotheses`; flags violations, never raises."""

    n: int
    m: int
    k: int
    controllable: bool
    kalman_exponent: Optional[int]
    fitted_slope: Optional[float]
    image_condition: str
    lipschitz_H: float
    lipschitz_gradH: float
    compact_U: bool
    cost_checks: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    seed: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "dimensions": {"n": self.n, "m": self.m, "k": self.k},
            "controllable": self.controllable,
            "kalman_exponent": self.kalman_exponent,
            "fitted_slope": self.fitted_slope,
            "image_condition": self.image_condition,
            "lipschitz_H": self.lipschitz_H,
            "lipschitz_gradH": self.lipschitz_gradH,
            "compact_U": self.compact_U,
            "cost_checks": self.cost_checks,
            "violations": list(self.violations),
            "seed": self.seed,
        }


def check_hypotheses(spec: ProblemSpec, n_p: int = 1000, p_range: float = 10.0,
                     n_samples: int = 2000, seed: int = 0) -> HypothesisReport:
    """Executable audit of the standing assumptions on ``spec``.

    Reports controllability of ``(a0, sigma)`` and the Kalman exponent, which
    image condition (if any) gives the ``t^{-1/2}`` B-smoothing rate, sampled
    Lipschitz constants of ``H_min`` and its gradient on a ``p``-grid in
    ``[-p_range, p_range]^m``, and sampled checks of the declared cost bounds.
    """
    from .gaussian import check_image_conditions, kalman
    from .hamiltonian import HamiltonianSpec, lipschitz_audit

    rng = np.random.default_rng(seed)
    kal = kalman(spec)
    image = check_image_conditions(spec)
    ham = HamiltonianSpec.from_problem(spec)
    violations = []
    try:
        L, Lg = lipschitz_audit(ham, n_points=n_p, p_range=p_range)
    except Exception as exc:  # unbounded Hamiltonian and similar
        L, Lg = float("inf"), float("inf")
        violations.append(f"hamiltonian: {exc}")

    checks = {}
    ys = rng.normal(scale=3.0, size=(n_samples, spec.n)) + spec.y0
    ts = rng.uniform(0.0, spec.T, size=n_samples)
    phi = np.asarray(spec.cost.terminal(ys), dtype=float)
    checks["terminal_sup_sampled"] = float(np.max(np.abs(phi)))
    if spec.cost.terminal_bound is not None:
        ok = checks["terminal_sup_sampled"] <= spec.cost.terminal_bound * (1 + 1e-9)
        checks["terminal_bound_ok"] = bool(ok)
        if not ok:
            violations.append("terminal cost exceeds its declared bound")
    elif spec.cost.terminal_growth is None:
        violations.append("terminal cost declares neither a bound nor a growth degree")
    run = np.asarray(spec.cost.running(ts, ys), dtype=float)
    checks["running_sup_sampled"] = float(np.max(np.abs(run)))
    if spec.cost.running_bound is not None:
        ok = checks["running_sup_sampled"] <= spec.cost.running_bound * (1 + 1e-9)
        checks["running_bound_ok"] = bool(ok)
        if not ok:
            violations.append("running cost exceeds its declared bound")
    us = spec.U.sample(n_samples, rng)
    l1 = np.asarray(spec.cost.control(us), dtype=float)
    lb = getattr(spec.cost.control, "lower_bound", -np.inf)
    checks["control_min_sampled"] = float(np.min(l1))
    checks["control_lower_bound"] = float(lb)
    if np.isfinite(lb) and checks["control_min_sampled"] < lb - 1e-9:
        violations.append("control cost drops below its declared lower bound")
    if not np.isfinite(lb) and not spec.U.compact:
        violations.append("control cost has no lower bound on a non-compact U")

    if image == "Fails":
        violations.append("neither image condition holds: B-smoothing unavailable")
    if not np.isfinite(L):
        violations.append("H_min is not Lipschitz on the sampled grid")

    return HypothesisReport(
        n=spec.n, m=spec.m, k=spec.k,
        controllable=kal.controllable, kalman_exponent=kal.r,
        fitted_slope=kal.fitted_slope, image_condition=image,
        lipschitz_H=float(L), lipschitz_gradH=float(Lg), compact_U=spec.U.compact,
        cost_checks=checks, violations=violations, seed=seed,
    )


# --------------------------------------------------------------------------
# JSON configuration


def _matrix(data, shape, name):
    arr = np.asarray(data, dtype=float)
    try:
        return arr.reshape(shape)
    except ValueError:
        raise ValidationError(f"{name}: expected {shape} entries, got {arr.size}") from None


def _state_cost(entry: dict, n: int, with_time: bool):
    """Build (callable, bound, growth, grad, spatially_constant) from a cost entry."""
    from .expr import state_function

    kind = entry.get("kind", "expression" if "expression" in entry else "zero")
    if kind == "zero":
        fn = (lambda t, y: np.zeros(np.shape(y)[:-1])) if with_time else (lambda y: np.zeros(np.shape(y)[:-1]))
        return fn, 0.0, None, None, True
    if kind == "constant":
        c = float(entry["value"])
        fn = (lambda t, y: np.full(np.shape(y)[:-1], c)) if with_time else (lambda y: np.full(np.shape(y)[:-1], c))
        return fn, abs(c), None, None, True
    if kind == "quadratic":
        w = _matrix(entry.get("weights", np.eye(n)), (n, n), "quadratic weights")
        c = np.asarray(entry.get("center", np.zeros(n)), dtype=float)

        def base(y):
            z = np.asarray(y, dtype=float) - c
            return 0.5 * np.einsum("...i,ij,...j->...", z, w, z)

        def grad(y):
            return (np.asarray(y, dtype=float) - c) @ (0.5 * (w + w.T))

        if with_time:
            return (lambda t, y: base(y)), None, 2, (lambda t, y: grad(y)), False
        return base, None, 2, grad, False
    if kind == "gaussian_bump":
        amp = float(entry.get("amplitude", 1.0))
        width = float(entry.get("width", 1.0))
        c = np.asarray(entry.get("center", np.zeros(n)), dtype=float)

        def base(y):
            z = np.asarray(y, dtype=float) - c
            return amp * (1.0 - np.exp(-np.sum(z * z, axis=-1) / (2 * width ** 2)))

        def grad(y):
            z = np.asarray(y, dtype=float) - c
            e = np.exp(-np.sum(z * z, axis=-1) / (2 * width ** 2))
            return amp * e[..., None] * z / width ** 2

        if with_time:
            return (lambda t, y: base(y)), abs(amp), None, (lambda t, y: grad(y)), False
        return base, abs(amp), None, grad, False
    if kind == "expression":
        fn = state_function(entry["expression"], n, time_arg="t" if with_time else None)
        bound = entry.get("bound")
        growth = entry.get("growth")
        const = bool(entry.get("spatially_constant", False))
        return fn, (None if bound is None else float(bound)), growth, None, const
    raise ValidationError(f"unknown cost kind {kind!r}")


def spec_from_dict(cfg: dict) -> ProblemSpec:
    """Build a :class:`ProblemSpec` from the JSON configuration schema.

    See the README for the full schema. Matrices are row-major nested lists or
    flat lists of the right size.
    """
    from .expr import compile_expression

    try:
        n, m, k = int(cfg["n"]), int(cfg["m"]), int(cfg["k"])
        d, T = float(cfg["d"]), float(cfg["T"])
    except KeyError as exc:
        raise ValidationError(f"missing key {exc}") from None
    a0 = _matrix(cfg.get("a0", np.zeros((n, n))), (n, n), "a0")
    b0 = _matrix(cfg.get("b0", np.zeros((n, m))), (n, m), "b0")
    sigma = _matrix(cfg["sigma"], (n, k), "sigma")

    delay = cfg.get("delay", {})
    dens = delay.get("density")
    atoms = tuple((float(a["at"]), _matrix(a["weight"], (n, m), "atom weight"))
                  for a in delay.get("atoms", []))
    if dens:
        kind = dens.get("kind", "piecewise_constant")
        bp = np.asarray(dens["breakpoints"], dtype=float)
        count = len(bp) - 1 if kind == "piecewise_constant" else len(bp)
        vals = _matrix(dens["values"], (count, n, m), "density values")
        b1 = DelayMeasure(d=d, n=n, m=m, breakpoints=bp, values=vals, kind=kind, atoms=atoms)
    else:
        b1 = DelayMeasure(d=d, n=n, m=m, atoms=atoms)

    ctrl = cfg.get("control", {"box": {"lo": [-1.0] * m, "hi": [1.0] * m}})
    if "box" in ctrl:
        U = ControlSet.box(ctrl["box"]["lo"], ctrl["box"]["hi"])
    elif "points" in ctrl:
        U = ControlSet.finite(ctrl["points"])
    else:
        raise ValidationError("control must define 'box' or 'points'")

    cost = cfg.get("cost", {})
    ccfg = cost.get("control", {"kind": "quadratic"})
    ckind = ccfg.get("kind", "quadratic")
    if ckind == "quadratic":
        l1 = QuadraticControlCost(_matrix(ccfg.get("weights", np.eye(m)), (m, m), "control weights"),
                                  float(ccfg.get("offset", 0.0)))
    elif ckind == "linear":
        l1 = LinearControlCost(ccfg.get("alpha", np.zeros(m)), float(ccfg.get("offset", 0.0)))
    elif ckind == "expression":
        names = [f"u{i}" for i in range(m)]
        fn = compile_expression(ccfg["expression"], names)
        l1 = CallableControlCost(
            lambda u: fn(**{nm: np.asarray(u)[..., i] for i, nm in enumerate(names)}),
            float(ccfg.get("lower_bound", -np.inf)))
    else:
        raise ValidationError(f"unknown control cost kind {ckind!r}")
    run, rb, rg, rgrad, rconst = _state_cost(cost.get("running", {"kind": "zero"}), n, True)
    term, tb, tg, tgrad, _ = _state_cost(cost.get("terminal", {"kind": "zero"}), n, False)
    costs = CostSpec(control=l1, terminal=term, running=run, running_bound=rb,
                     running_growth=rg, running_grad=rgrad, running_spatially_constant=rconst,
                     terminal_bound=tb, terminal_growth=tg, terminal_grad=tgrad)

    init = cfg.get("initial", {})
    y0 = np.asarray(init.get("y0", np.zeros(n)), dtype=float)
    hist = init.get("u0", {"constant": [0.0] * m})
    if "constant" in hist:
        u0 = np.asarray(hist["constant"], dtype=float)
    elif "expression" in hist:
        fn = compile_expression(hist["expression"], ("s",))

        def u0(times, fn=fn):
            vals = np.asarray(fn(s=np.asarray(times, dtype=float)), dtype=float)
            return np.broadcast_to(vals.reshape(len(times), -1), (len(times), m))
    else:
        raise ValidationError("initial.u0 must define 'constant' or 'expression'")
    return ProblemSpec(a0=a0, b0=b0, sigma=sigma, b1=b1, d=d, T=T, U=U, cost=costs,
                       y0=y0, u0=u0, name=str(cfg.get("name", "problem")))


def load_spec(path) -> ProblemSpec:
    """Load a problem specification from a JSON file."""
    with open(Path(path)) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return spec_from_dict(cfg)
