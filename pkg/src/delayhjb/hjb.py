"""Mild HJB solution on the reduced representation by Picard iteration.

The value is sought as ``w(t, x) = f(t, (e^{tA}x)_0)`` with ``t`` the time to
go, ``w(t, .) = v(T - t, .)``, and the B-gradient as
``grad_B w(t, x) = t^{-1/2} fbar(t, (e^{tA}x)_0)``. The pair ``(f, fbar)``
solves

    f(t, y)    = E phi(y + Z_t) + int_0^t E[ H_min(s^{-1/2} fbar(s, y + e^{s a0} Z_{t-s}))
                                          + l0(T - s, e^{-s a0} y + Z_{t-s}) ] ds
    fbar(t, y) = sqrt(t) * (matching B-gradient kernels)

with ``Z_r ~ N(0, Q_r)``. Time integrals use ``s = t sin^2(theta)``, which
removes the ``s^{-1/2}`` and ``(t - s)^{-1/2}`` endpoint singularities.
The time grid is uniform in ``sqrt(t)``.
"""

from __future__ import annotations

import json
import time as _time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.interpolate import RectBivariateSpline, make_interp_spline

from .errors import DomainError, NonContractionError, SingularityError, SmoothingUnavailable
from .gaussian import (GaussKernel, QuadRule, covariance, smooth_apply, smooth_grad_B,
                       smooth_hess_B, whitened_control_matrix)
from .hamiltonian import HamiltonianSpec, lipschitz_audit
from .model import ProblemSpec, lift_initial
from .operators import AbstractState, etAB_0, mat_exp, reduced_coordinate


# --------------------------------------------------------------------------
# quadrature in time


def beta_quadrature(t: float, n_theta: int):
    """Nodes ``s`` and weights ``W`` for ``int_0^t g(s) ds`` via ``s = t sin^2(theta)``.

    Integrates ``s^{-1/2} (t - s)^{-1/2}`` to ``pi`` up to rounding.
    """
    x, w = np.polynomial.legendre.leggauss(n_theta)
    theta = 0.25 * np.pi * (x + 1.0)
    wt = 0.25 * np.pi * w
    s = t * np.sin(theta) ** 2
    lag = t * np.cos(theta) ** 2
    return s, lag, wt * t * np.sin(2.0 * theta)


# --------------------------------------------------------------------------
# grids and interpolation


@dataclass(frozen=True)
class GridConfig:
    """Discretisation parameters; ``None`` entries are filled from the problem."""

    n_time: int = 32
    n_theta: int = 24
    gh_order: Optional[int] = None
    n_space: Optional[int] = None
    bounds: Optional[tuple] = None
    tol: float = 1e-9
    max_iter: int = 200
    eta: Optional[float] = None

    def resolved(self, n: int) -> "GridConfig":
        gh = self.gh_order or (20 if n == 1 else 10)
        ns = self.n_space or (241 if n == 1 else 41)
        return GridConfig(self.n_time, self.n_theta, gh, ns, self.bounds, self.tol,
                          self.max_iter, self.eta)


def interp_multilinear(axes, values, pts) -> np.ndarray:
    """Multilinear interpolation on a tensor grid with constant extrapolation.

    ``values`` has shape ``(N_1, ..., N_n) + extra``; ``pts`` is ``(P, n)``.
    Returns ``(P,) + extra``.
    """
    pts = np.asarray(pts, dtype=float)
    n = len(axes)
    idx = []
    frac = []
    for j, ax in enumerate(axes):
        x = np.clip(pts[:, j], ax[0], ax[-1])
        h = ax[1] - ax[0]
        i = np.clip(((x - ax[0]) / h).astype(int), 0, len(ax) - 2)
        idx.append(i)
        frac.append((x - ax[i]) / h)
    extra = values.shape[n:]
    out = np.zeros((len(pts),) + extra)
    for corner in range(2 ** n):
        weight = np.ones(len(pts))
        index = []
        for j in range(n):
            bit = (corner >> j) & 1
            weight = weight * (frac[j] if bit else 1.0 - frac[j])
            index.append(idx[j] + bit)
        out += weight.reshape((-1,) + (1,) * len(extra)) * values[tuple(index)]
    return out


class _CubicSlice:
    """Cubic spline of an ``(N_1, ..., N_n, m)`` slice with constant extrapolation."""

    def __init__(self, axes, values):
        self.axes = axes
        self.n = len(axes)
        self.m = values.shape[-1]
        if self.n == 1:
            self.spl = make_interp_spline(axes[0], values, k=3)
            self.dspl = self.spl.derivative()
        elif self.n == 2:
            self.spl = [RectBivariateSpline(axes[0], axes[1], values[..., c], kx=3, ky=3)
                        for c in range(self.m)]
        else:
            raise DomainError("cubic interpolation is available for n <= 2")

    def _clip(self, pts):
        lo = np.array([ax[0] for ax in self.axes])
        hi = np.array([ax[-1] for ax in self.axes])
        clipped = np.clip(pts, lo, hi)
        return clipped, (pts > lo) & (pts < hi)

    def __call__(self, pts):
        pts, _ = self._clip(np.asarray(pts, dtype=float))
        if self.n == 1:
            return self.spl(pts[:, 0])
        return np.stack([s.ev(pts[:, 0], pts[:, 1]) for s in self.spl], axis=-1)

    def jacobian(self, pts):
        """``(P, m, n)`` derivative; zero where extrapolated."""
        pts, inside = self._clip(np.asarray(pts, dtype=float))
        if self.n == 1:
            jac = self.dspl(pts[:, 0])[:, :, None]
        else:
            jac = np.stack([np.stack([s.ev(pts[:, 0], pts[:, 1], dx=1, dy=0),
                                      s.ev(pts[:, 0], pts[:, 1], dx=0, dy=1)], axis=-1)
                            for s in self.spl], axis=1)
        return jac * inside[:, None, :]


@dataclass
class ReducedValueField:
    """Solved pair ``(f, fbar)`` on ``times x tensor grid``.

    ``f`` has shape ``(K + 1, N_1, ..., N_n)`` and ``fbar`` the same plus a
    trailing ``m``; ``fbar`` carries the ``sqrt(t)`` weight. Time is the time
    to go; interpolation is linear in ``sqrt(t)`` and multilinear in ``y``.
    """

    T: float
    times: np.ndarray
    axes: list
    f: np.ndarray
    fbar: np.ndarray
    spec: Optional[ProblemSpec] = None
    config: Optional[GridConfig] = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.axes)

    @property
    def m(self) -> int:
        return self.fbar.shape[-1]

    @property
    def K(self) -> int:
        return len(self.times) - 1

    def nodes(self) -> np.ndarray:
        grids = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def _bracket(self, t: float):
        tau = np.sqrt(max(0.0, min(float(t), self.T)))
        dtau = np.sqrt(self.T) / self.K
        j = min(int(tau / dtau), self.K - 1)
        return j, tau / dtau - j

    def slice_at(self, t: float, which: str = "fbar") -> np.ndarray:
        data = self.fbar if which == "fbar" else self.f
        j, a = self._bracket(t)
        return (1.0 - a) * data[j] + a * data[j + 1]

    def value(self, t: float, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return interp_multilinear(self.axes, self.slice_at(t, "f"), y)

    def bgrad(self, t: float, y) -> np.ndarray:
        """Weighted B-gradient ``fbar(t, y)``, shape ``(P, m)``."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return interp_multilinear(self.axes, self.slice_at(t, "fbar"), y)

    def costate(self, t: float, y) -> np.ndarray:
        """``grad_B w(t, .) = t^{-1/2} fbar(t, y)`` (requires ``t > 0``)."""
        if t <= 0:
            raise SingularityError("B-gradient undefined at zero time to go")
        return self.bgrad(t, y) / np.sqrt(t)

    def cubic_slice(self, t: float) -> _CubicSlice:
        return _CubicSlice(self.axes, self.slice_at(t, "fbar"))

    # export / import ------------------------------------------------------

    def header(self) -> dict:
        return {
            "format": "reduced-value-field/1",
            "T": self.T,
            "n": self.n,
            "m": self.m,
            "times": [float(t) for t in self.times],
            "axes": [[float(a) for a in ax] for ax in self.axes],
            "columns": ["t"] + [f"y{i}" for i in range(self.n)] + ["f"]
                       + [f"fbar{k}" for k in range(self.m)],
            "meta": self.meta,
        }

    def export(self, stem) -> tuple[Path, Path]:
        """Write ``stem.json`` (grid header) and ``stem.csv`` (one row per node)."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        head = stem.with_suffix(".json")
        body = stem.with_suffix(".csv")
        head.write_text(json.dumps(self.header(), indent=2, sort_keys=True))
        nodes = self.nodes()
        rows = []
        for i, t in enumerate(self.times):
            block = np.column_stack([np.full(len(nodes), t), nodes, self.f[i].ravel(),
                                     self.fbar[i].reshape(len(nodes), self.m)])
            rows.append(block)
        np.savetxt(body, np.vstack(rows), delimiter=",", fmt="%.17g",
                   header=",".join(self.header()["columns"]), comments="")
        return head, body

    @classmethod
    def load(cls, stem, spec: Optional[ProblemSpec] = None) -> "ReducedValueField":
        stem = Path(stem)
        head = json.loads(stem.with_suffix(".json").read_text())
        data = np.loadtxt(stem.with_suffix(".csv"), delimiter=",", skiprows=1, ndmin=2)
        axes = [np.asarray(ax) for ax in head["axes"]]
        shape = tuple(len(ax) for ax in axes)
        times = np.asarray(head["times"])
        n, m = head["n"], head["m"]
        f = data[:, 1 + n].reshape((len(times),) + shape)
        fbar = data[:, 2 + n:2 + n + m].reshape((len(times),) + shape + (m,))
        return cls(head["T"], times, axes, f, fbar, spec=spec, meta=head.get("meta", {}))


@dataclass
class SolveReport:
    iterations: int
    distances: list
    ratios: list
    final_residual: float
    eta: float
    contraction_bound: float
    a_priori_bound: float
    C_T: float
    sup_f: float
    running_exact: bool
    lipschitz_H: float
    converged: bool
    elapsed: float

    def to_dict(self) -> dict:
        return asdict(self)


def weighted_norm(field_or_pair, eta: float, times=None) -> float:
    """``sup_t e^{-eta t} sup_y |f| + sup_t e^{-eta t} sup_y |fbar|``."""
    if isinstance(field_or_pair, ReducedValueField):
        f, fb, times = field_or_pair.f, field_or_pair.fbar, field_or_pair.times
    else:
        f, fb = field_or_pair
    weight = np.exp(-eta * np.asarray(times))
    axes_f = tuple(range(1, f.ndim))
    axes_b = tuple(range(1, fb.ndim))
    sf = np.max(weight * np.max(np.abs(f), axis=axes_f)) if f.size else 0.0
    sb = np.max(weight * np.max(np.abs(fb), axis=axes_b)) if fb.size else 0.0
    return float(sf + sb)


# --------------------------------------------------------------------------
# solver internals


def default_bounds(spec: ProblemSpec, x: Optional[AbstractState] = None):
    """Per-axis ``(lo, hi)`` centred at the reachable mean of the initial state."""
    x = x if x is not None else lift_initial(spec)
    centre = reduced_coordinate(spec.T, x, spec.a0)
    q = covariance(spec.T, spec.a0, spec.sigma, "vanloan")
    spread = 6.0 * np.sqrt(max(float(np.max(np.linalg.eigvalsh(q))), 0.0))
    w = np.full(x.M + 1, x.step)
    w[0] = w[-1] = 0.5 * x.step
    hist = float(w @ np.linalg.norm(x.x1, axis=1))
    start = np.linalg.norm(mat_exp(spec.T, spec.a0), 2) * (np.linalg.norm(x.x0) + hist)
    reach = spec.T * (np.linalg.norm(spec.b0, 2) + spec.b1.tv_mass()) * spec.U.radius()
    half = start + spread + reach
    half = max(half, 1.0)
    return tuple((float(c - half), float(c + half)) for c in centre)


class _Kernels:
    """Kernels, shifts and control weights for every ``(t_i, s_k)`` pair."""

    def __init__(self, spec, times, n_theta, quad):
        self.spec = spec
        K = len(times) - 1
        self.s = np.zeros((K + 1, n_theta))
        self.lag = np.zeros((K + 1, n_theta))
        self.W = np.zeros((K + 1, n_theta))
        for i in range(1, K + 1):
            self.s[i], self.lag[i], self.W[i] = beta_quadrature(times[i], n_theta)
        covs = covariance(self.lag, spec.a0, spec.sigma, "vanloan")
        self.kernels = {}
        self.C = {}
        self.expo = {}
        self.pull = {}
        bmats = [etAB_0(t, spec) for t in times]
        for i in range(1, K + 1):
            for k in range(n_theta):
                ker = GaussKernel.from_covariance(self.lag[i, k], covs[i, k], quad)
                s = self.s[i, k]
                self.kernels[i, k] = ker
                self.expo[i, k] = mat_exp(s, spec.a0)
                self.pull[i, k] = mat_exp(-s, spec.a0)
                self.C[i, k] = whitened_control_matrix(s, spec, ker, self.pull[i, k] @ bmats[i])
        self.bmats = bmats


def _running_terms(spec, kernel, pts_y, tau_s, pull, C):
    """``(E l0, E l0 w @ C)`` at pulled-back points for one quadrature node."""
    z, w, wts = kernel.nodes()
    base = pts_y @ pull.T
    vals = np.asarray(spec.cost.running(spec.T - tau_s, base[:, None, :] + z), dtype=float)
    mean = vals @ wts
    grad = np.einsum("pq,qr,q->pr", vals, w, wts) @ C if kernel.rank else np.zeros((len(pts_y), spec.m))
    return mean, grad


def _h_terms(ham, field_slice, axes, kernel, pts_y, expo, s, C, m):
    """``(E H, E H w @ C)`` for one quadrature node given the fbar slice at ``s``."""
    z, w, wts = kernel.nodes()
    shift = z @ expo.T
    P, Q = len(pts_y), len(wts)
    where = (pts_y[:, None, :] + shift[None]).reshape(P * Q, -1)
    fb = interp_multilinear(axes, field_slice, where)
    h = ham.h_min(fb / np.sqrt(s)).reshape(P, Q)
    mean = h @ wts
    grad = np.einsum("pq,qr,q->pr", h, w, wts) @ C if kernel.rank else np.zeros((P, m))
    return mean, grad


def _contraction_factor(ker: _Kernels, times, L, eta):
    """Discrete Lipschitz bound of the Picard map in the eta-weighted norm."""
    worst = 0.0
    for i in range(1, len(times)):
        total = 0.0
        for k in range(ker.s.shape[1]):
            kk = ker.kernels[i, k]
            _, w, wts = kk.nodes()
            absw = float(np.sum(wts * np.linalg.norm(w, axis=1))) if kk.rank else 0.0
            cn = float(np.linalg.norm(ker.C[i, k], 2)) if ker.C[i, k].size else 0.0
            s = ker.s[i, k]
            total += ker.W[i, k] * np.exp(-eta * (times[i] - s)) / np.sqrt(s) * (
                1.0 + np.sqrt(times[i]) * cn * absw)
        worst = max(worst, total)
    return L * worst


def _a_priori(ker: _Kernels, times, L, h0, phi_sup, l0_sup, cw_sup):
    """Sup bound for ``f`` from a scalar Volterra comparison on the time grid."""
    K = len(times) - 1
    g = np.zeros(K + 1)
    dtau = np.sqrt(times[-1]) / K

    def g_at(s, g):
        tau = np.sqrt(s)
        j = min(int(tau / dtau), K - 1)
        return max(g[j], g[j + 1])

    for _ in range(2000):
        new = np.zeros(K + 1)
        for i in range(1, K + 1):
            acc = 0.0
            for k in range(ker.s.shape[1]):
                kk = ker.kernels[i, k]
                _, w, wts = kk.nodes()
                absw = float(np.sum(wts * np.linalg.norm(w, axis=1))) if kk.rank else 0.0
                cn = float(np.linalg.norm(ker.C[i, k], 2)) if ker.C[i, k].size else 0.0
                s = ker.s[i, k]
                acc += ker.W[i, k] * cn * absw * (abs(h0) + l0_sup + L * g_at(s, g) / np.sqrt(s))
            new[i] = cw_sup * phi_sup + np.sqrt(times[i]) * acc
        if np.max(np.abs(new - g)) <= 1e-12 * (1 + np.max(new)):
            g = new
            break
        if not np.all(np.isfinite(new)) or np.max(new) > 1e12:
            return np.inf
        g = new
    G = float(np.max(g))
    T = times[-1]
    return phi_sup + T * (abs(h0) + l0_sup) + 2.0 * L * np.sqrt(T) * G


def _sup_bound(declared, fn, pts):
    if declared is not None:
        return float(declared)
    return float(np.max(np.abs(fn(pts))))


def picard_solve(spec: ProblemSpec, config: Optional[GridConfig] = None,
                 ham: Optional[HamiltonianSpec] = None, x: Optional[AbstractState] = None,
                 verbose: bool = False):
    """Solve the mild HJB equation; returns ``(ReducedValueField, SolveReport)``.

    The B-gradient is carried by its own kernel rather than differenced from
    ``f``. Iteration stops when the unweighted sup distance between iterates
    falls below ``config.tol`` (which bounds the weighted distance too).
    """
    from .gaussian import check_image_conditions

    started = _time.perf_counter()
    config = (config or GridConfig()).resolved(spec.n)
    if check_image_conditions(spec) == "Fails":
        raise SmoothingUnavailable("image conditions fail: the B-gradient kernel is unavailable")
    ham = ham or HamiltonianSpec.from_problem(spec)
    L, _ = lipschitz_audit(ham)
    quad = QuadRule(order=config.gh_order)
    bounds = config.bounds or default_bounds(spec, x)
    axes = [np.linspace(lo, hi, config.n_space) for lo, hi in bounds]
    K = config.n_time
    times = spec.T * (np.arange(K + 1) / K) ** 2
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    shape = tuple(len(ax) for ax in axes)
    m = spec.m

    ker = _Kernels(spec, times, config.n_theta, quad)

    # iteration-independent part: smoothed terminal cost and running cost
    phi = spec.cost.terminal
    f_base = np.zeros((K + 1, len(pts)))
    b_base = np.zeros((K + 1, len(pts), m))
    f_base[0] = phi(pts)
    for i in range(1, K + 1):
        kt = GaussKernel.from_covariance(times[i], covariance(times[i], spec.a0, spec.sigma, "vanloan"), quad)
        f_base[i] = smooth_apply(times[i], phi, pts, kt)
        b_base[i] = np.sqrt(times[i]) * smooth_grad_B(times[i], phi, pts, kt, spec, ker.bmats[i])
        for k in range(config.n_theta):
            mean, grad = _running_terms(spec, ker.kernels[i, k], pts, ker.s[i, k],
                                        ker.pull[i, k], ker.C[i, k])
            f_base[i] += ker.W[i, k] * mean
            b_base[i] += np.sqrt(times[i]) * ker.W[i, k] * grad

    h0 = float(ham.h_min(np.zeros(m)))
    eta = config.eta
    if eta is None:
        eta = 0.0
        factor = _contraction_factor(ker, times, L, eta)
        step = 1.0 / spec.T
        while factor >= 0.5 and step <= 64.0 / spec.T:
            eta = step
            factor = _contraction_factor(ker, times, L, eta)
            step *= 2.0
    factor = _contraction_factor(ker, times, L, eta)

    def sweep(fb_prev):
        fb_prev = fb_prev.reshape((K + 1,) + shape + (m,))
        f_new = f_base.copy()
        b_new = b_base.copy()
        dtau = np.sqrt(spec.T) / K
        for i in range(1, K + 1):
            for k in range(config.n_theta):
                s = ker.s[i, k]
                tau = np.sqrt(s)
                j = min(int(tau / dtau), K - 1)
                a = tau / dtau - j
                sl = (1.0 - a) * fb_prev[j] + a * fb_prev[j + 1]
                mean, grad = _h_terms(ham, sl, axes, ker.kernels[i, k], pts, ker.expo[i, k],
                                      s, ker.C[i, k], m)
                f_new[i] += ker.W[i, k] * mean
                b_new[i] += np.sqrt(times[i]) * ker.W[i, k] * grad
        return f_new, b_new

    f_cur, b_cur = f_base, b_base
    distances, ratios = [], []
    converged = False
    bad = 0
    for it in range(1, config.max_iter + 1):
        f_new, b_new = sweep(b_cur)
        dist = weighted_norm((f_new - f_cur, b_new - b_cur), eta, times)
        plain = float(np.max(np.abs(f_new - f_cur)) + np.max(np.abs(b_new - b_cur)))
        if distances:
            ratio = dist / distances[-1] if distances[-1] > 0 else 0.0
            ratios.append(ratio)
            floor = 1e-13 * (1.0 + np.max(np.abs(f_new)))
            bad = bad + 1 if (ratio >= 1.0 and dist > floor) else 0
            if bad >= 3:
                raise NonContractionError(
                    f"Picard ratios >= 1 for 3 iterations (eta={eta:g}); "
                    "increase eta or check the Lipschitz data")
        distances.append(dist)
        if verbose:
            print(f"iter {it}: weighted distance {dist:.3e}")
        f_cur, b_cur = f_new, b_new
        if plain < config.tol:
            converged = True
            break

    f_chk, b_chk = sweep(b_cur)
    residual = weighted_norm((f_chk - f_cur, b_chk - b_cur), eta, times)

    phi_sup = _sup_bound(spec.cost.terminal_bound, phi, pts)
    l0_sup = _sup_bound(spec.cost.running_bound, lambda y: spec.cost.running(0.0, y), pts)
    cw_sup = 0.0
    for i in range(1, K + 1):
        kt = GaussKernel.from_covariance(times[i], covariance(times[i], spec.a0, spec.sigma, "vanloan"), quad)
        cw = whitened_control_matrix(times[i], spec, kt, ker.bmats[i])
        _, w, wts = kt.nodes()
        absw = float(np.sum(wts * np.linalg.norm(w, axis=1))) if kt.rank else 0.0
        cw_sup = max(cw_sup, np.sqrt(times[i]) * (float(np.linalg.norm(cw, 2)) if cw.size else 0.0) * absw)
    bound = _a_priori(ker, times, L, h0, phi_sup, l0_sup, cw_sup)
    scale = phi_sup + l0_sup + abs(h0)
    C_T = bound / scale if scale > 0 else 0.0

    fld = ReducedValueField(
        T=spec.T, times=times, axes=axes,
        f=f_cur.reshape((K + 1,) + shape), fbar=b_cur.reshape((K + 1,) + shape + (m,)),
        spec=spec, config=config,
        meta={"eta": eta, "gh_order": config.gh_order, "n_theta": config.n_theta,
              "running_exact": bool(spec.cost.running_spatially_constant)},
    )
    fld.ham = ham
    fld.quad = quad
    report = SolveReport(
        iterations=len(distances), distances=distances, ratios=ratios,
        final_residual=residual, eta=eta, contraction_bound=factor,
        a_priori_bound=bound, C_T=C_T, sup_f=float(np.max(np.abs(f_cur))),
        running_exact=bool(spec.cost.running_spatially_constant), lipschitz_H=L,
        converged=converged, elapsed=_time.perf_counter() - started,
    )
    return fld, report


# --------------------------------------------------------------------------
# evaluation at a lifted state


def _field_parts(fld: ReducedValueField):
    spec = fld.spec
    if spec is None:
        raise DomainError("field has no attached problem specification")
    ham = getattr(fld, "ham", None) or HamiltonianSpec.from_problem(spec)
    quad = getattr(fld, "quad", None) or QuadRule(order=(fld.config.gh_order if fld.config else 20))
    n_theta = fld.config.n_theta if fld.config else 24
    return spec, ham, quad, n_theta


def _nystrom(fld: ReducedValueField, tau: float, y, x: Optional[AbstractState],
             running: str = "pullback"):
    """One application of the Picard map at time to go ``tau`` and points ``y``.

    Returns ``(f, grad_B)`` with the unweighted B-gradient. With
    ``running="exact"`` the running cost is evaluated at the true reduced
    point ``(e^{(tau - s)A} x)_0`` (needs ``x`` and a single point ``y``).
    """
    spec, ham, quad, n_theta = _field_parts(fld)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    m = spec.m
    kt = GaussKernel.from_covariance(tau, covariance(tau, spec.a0, spec.sigma, "vanloan"), quad)
    bmat = etAB_0(tau, spec)
    f = smooth_apply(tau, spec.cost.terminal, y, kt)
    g = smooth_grad_B(tau, spec.cost.terminal, y, kt, spec, bmat)
    s_nodes, lags, W = beta_quadrature(tau, n_theta)
    covs = covariance(lags, spec.a0, spec.sigma, "vanloan")
    for k in range(n_theta):
        s = s_nodes[k]
        ker = GaussKernel.from_covariance(lags[k], covs[k], quad)
        expo = mat_exp(s, spec.a0)
        pull = mat_exp(-s, spec.a0)
        C = whitened_control_matrix(s, spec, ker, pull @ bmat)
        sl = fld.slice_at(s, "fbar")
        hm, hg = _h_terms(ham, sl, fld.axes, ker, y, expo, s, C, m)
        if running == "exact":
            if x is None:
                raise DomainError("exact running-cost evaluation needs the lifted state")
            base = reduced_coordinate(lags[k], x, spec.a0)
            z, w, wts = ker.nodes()
            vals = np.asarray(spec.cost.running(spec.T - s, base + z), dtype=float)
            Ce = whitened_control_matrix(lags[k], spec, ker, etAB_0(lags[k], spec))
            rm = np.full(len(y), vals @ wts)
            rg = np.broadcast_to((vals * wts) @ w @ Ce if ker.rank else np.zeros(m), (len(y), m))
        else:
            rm, rg = _running_terms(spec, ker, y, s, pull, C)
        f = f + W[k] * (hm + rm)
        g = g + W[k] * (hg + rg)
    return f, g


def _check_t(fld, t):
    if not (0.0 <= t <= fld.T + 1e-12):
        raise DomainError(f"t = {t} outside [0, T]")
    return max(0.0, fld.T - t)


def evaluate_v(t: float, x: AbstractState, fld: ReducedValueField,
               running: str = "pullback") -> float:
    """``v(t, x) = f(T - t, (e^{(T-t)A} x)_0)`` by one Picard application at the exact point."""
    tau = _check_t(fld, t)
    spec = fld.spec
    if tau == 0.0:
        return float(spec.cost.terminal(x.x0[None])[0])
    y = reduced_coordinate(tau, x, spec.a0)
    f, _ = _nystrom(fld, tau, y, x, running)
    return float(f[0])


def grad_B_v(t: float, x: AbstractState, fld: ReducedValueField,
             running: str = "pullback") -> np.ndarray:
    """``grad_B v(t, x)``; raises :class:`SingularityError` at ``t = T``."""
    tau = _check_t(fld, t)
    if tau <= 0.0:
        raise SingularityError("B-gradient is not defined at the terminal time")
    y = reduced_coordinate(tau, x, fld.spec.a0)
    _, g = _nystrom(fld, tau, y, x, running)
    return g[0]


@dataclass
class SecondDerivative:
    """Mixed second derivative ``(h, k) -> (e^{tau A} h)_0^T matrix k``."""

    matrix: np.ndarray
    bn: np.ndarray
    nb: np.ndarray
    asymmetry: float
    tau: float


def _bgrad_spline(fld, tau, y, step):
    """Unweighted B-gradient at ``y`` using cubic interpolation of fbar (pullback mode)."""
    spec, ham, quad, n_theta = _field_parts(fld)
    kt = GaussKernel.from_covariance(tau, covariance(tau, spec.a0, spec.sigma, "vanloan"), quad)
    bmat = etAB_0(tau, spec)
    y = np.atleast_2d(y)
    g = smooth_grad_B(tau, spec.cost.terminal, y, kt, spec, bmat)
    s_nodes, lags, W = beta_quadrature(tau, n_theta)
    covs = covariance(lags, spec.a0, spec.sigma, "vanloan")
    for k in range(n_theta):
        s = s_nodes[k]
        ker = GaussKernel.from_covariance(lags[k], covs[k], quad)
        pull = mat_exp(-s, spec.a0)
        C = whitened_control_matrix(s, spec, ker, pull @ bmat)
        z, w, wts = ker.nodes()
        shift = z @ mat_exp(s, spec.a0).T
        spl = fld.cubic_slice(s)
        where = (y[:, None, :] + shift[None]).reshape(-1, spec.n)
        h = ham.h_min(spl(where) / np.sqrt(s)).reshape(len(y), -1)
        rm, rg = _running_terms(spec, ker, y, s, pull, C)
        g = g + W[k] * (np.einsum("pq,qr,q->pr", h, w, wts) @ C + rg)
    return g


def grad_B_grad_v(t: float, x: AbstractState, fld: ReducedValueField,
                  fd_step: float = 1e-4) -> SecondDerivative:
    """Mixed second derivative of ``v`` in both orders.

    ``bn`` applies the B-kernel to the gradient of the integrand (chain rule
    through ``H_min``, whose gradient is the selection ``gamma``); ``nb``
    differentiates the B-gradient in ``y`` by central differences. Both use
    cubic interpolation of ``fbar`` and the pulled-back running cost.
    """
    tau = _check_t(fld, t)
    if tau <= 0.0:
        raise SingularityError("second derivatives are not defined at the terminal time")
    spec, ham, quad, n_theta = _field_parts(fld)
    y = reduced_coordinate(tau, x, spec.a0)[None]
    kt = GaussKernel.from_covariance(tau, covariance(tau, spec.a0, spec.sigma, "vanloan"), quad)
    bmat = etAB_0(tau, spec)
    bn = smooth_hess_B(tau, spec.cost.terminal_gradient, y, kt, spec, "BN", bmat=bmat)[0]
    s_nodes, lags, W = beta_quadrature(tau, n_theta)
    covs = covariance(lags, spec.a0, spec.sigma, "vanloan")
    for k in range(n_theta):
        s = s_nodes[k]
        ker = GaussKernel.from_covariance(lags[k], covs[k], quad)
        pull = mat_exp(-s, spec.a0)
        C = whitened_control_matrix(s, spec, ker, pull @ bmat)
        z, w, wts = ker.nodes()
        shift = z @ mat_exp(s, spec.a0).T
        where = y[0] + shift
        spl = fld.cubic_slice(s)
        p = spl(where) / np.sqrt(s)
        jac = spl.jacobian(where) / np.sqrt(s)
        dF = np.einsum("qmn,qm->qn", jac, ham.gamma(p))
        run_pts = y[0] @ pull.T + z
        dl = spec.cost.running_gradient(spec.T - s, run_pts) @ pull
        bn = bn + W[k] * np.einsum("qn,qr,q->nr", dF + dl, w, wts) @ C
    nb = np.zeros_like(bn)
    for i in range(spec.n):
        e = np.zeros(spec.n)
        e[i] = fd_step
        up = _bgrad_spline(fld, tau, y[0] + e, fd_step)[0]
        dn = _bgrad_spline(fld, tau, y[0] - e, fd_step)[0]
        nb[i] = (up - dn) / (2 * fd_step)
    asym = float(np.max(np.abs(bn - nb)))
    return SecondDerivative(0.5 * (bn + nb), bn, nb, asym, tau)


# --------------------------------------------------------------------------
# mollified approximations


def mollify(fn, width: float, n: int, order: int = 20, time_arg: bool = False):
    """Gaussian mollification ``y -> E fn(y + width w)`` with Gauss-Hermite nodes."""
    w, wts = QuadRule(order=order).nodes(n)
    shift = width * w
    if time_arg:
        return lambda t, y: np.asarray(fn(t, np.asarray(y)[..., None, :] + shift)) @ wts
    return lambda y: np.asarray(fn(np.asarray(y)[..., None, :] + shift)) @ wts


@dataclass
class MollifiedLevel:
    width: float
    field: ReducedValueField
    report: SolveReport
    sup_distance: float
    grad_distance: float
    sup_norm: float


def mollified_sequence(spec: ProblemSpec, n_levels: int = 5, config: Optional[GridConfig] = None,
                       probe_halfwidth: float = 2.0):
    """Solve with data mollified at widths ``2^{-1}, ..., 2^{-n_levels}``.

    Returns ``(base_field, base_report, levels)``; each level records the sup
    distance of ``f`` and of ``fbar`` to the base solution over a probe box
    around the grid centre, and the sup norm of ``f``.
    """
    from dataclasses import replace

    config = (config or GridConfig()).resolved(spec.n)
    bounds = config.bounds or default_bounds(spec)
    config = replace(config, bounds=bounds)
    base, base_rep = picard_solve(spec, config)
    centre = np.array([0.5 * (lo + hi) for lo, hi in bounds])
    masks = [np.abs(ax - c) <= probe_halfwidth for ax, c in zip(base.axes, centre)]
    sel = np.ix_(*masks)
    levels = []
    for level in range(1, n_levels + 1):
        width = 2.0 ** (-level)
        cost = replace(spec.cost,
                       terminal=mollify(spec.cost.terminal, width, spec.n),
                       running=mollify(spec.cost.running, width, spec.n, time_arg=True),
                       terminal_grad=None, running_grad=None)
        fld, rep = picard_solve(replace(spec, cost=cost), config)
        dist = max(float(np.max(np.abs(fld.f[i][sel] - base.f[i][sel]))) for i in range(fld.K + 1))
        gdist = max(float(np.max(np.abs(fld.fbar[i][sel] - base.fbar[i][sel])))
                    for i in range(fld.K + 1))
        levels.append(MollifiedLevel(width, fld, rep, dist, gdist, float(np.max(np.abs(fld.f)))))
    return base, base_rep, levels
