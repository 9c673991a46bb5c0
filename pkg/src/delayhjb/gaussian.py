"""Gaussian smoothing kernels for the partially smoothing transition semigroup.

For terminal data that only depend on the present state, ``phi(x) = phi_bar(x0)``,
the transition semigroup acts through the finite dimensional covariance

    Q_t = int_0^t e^{s a0} sigma sigma^T e^{s a0^T} ds

so every evaluator below is an ``n``-dimensional Gaussian expectation. We
whiten ``z = F w`` with ``F = V diag(sqrt(lam))`` restricted to the range of
``Q_t`` and integrate in ``w`` by tensor Gauss-Hermite (or scrambled Sobol
points when the range has more than three dimensions).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy import integrate, stats
from scipy.linalg import expm

from .errors import SmoothingUnavailable
from .model import ProblemSpec
from .operators import etAB_0, mat_exp

RANK_CUTOFF = 1e-12
MEMBERSHIP_TOL = 1e-9


# --------------------------------------------------------------------------
# quadrature rules


@dataclass(frozen=True)
class QuadRule:
    """Standard normal quadrature: ``kind`` is ``"gauss_hermite"`` or ``"sobol"``."""

    kind: str = "gauss_hermite"
    order: int = 20
    samples: int = 2 ** 14
    seed: int = 0

    def nodes(self, dim: int):
        """Nodes ``(q, dim)`` and weights ``(q,)`` summing to one."""
        if dim == 0:
            return np.zeros((1, 0)), np.ones(1)
        if self.kind == "gauss_hermite" and dim <= 3:
            return _hermite_tensor(self.order, dim)
        return _sobol_normal(self.samples, dim, self.seed)

    def describe(self) -> dict:
        if self.kind == "gauss_hermite":
            return {"kind": self.kind, "order": self.order}
        return {"kind": self.kind, "samples": self.samples, "seed": self.seed}


@lru_cache(maxsize=32)
def _hermite_tensor(order: int, dim: int):
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / np.sqrt(2.0 * np.pi)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    wts = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


@lru_cache(maxsize=8)
def _sobol_normal(samples: int, dim: int, seed: int):
    engine = stats.qmc.Sobol(d=dim, scramble=True, seed=seed)
    u = engine.random(samples)
    pts = stats.norm.ppf(np.clip(u, 1e-15, 1 - 1e-15))
    return pts, np.full(samples, 1.0 / samples)


# --------------------------------------------------------------------------
# covariance


def covariance(t, a0, sigma, method: str = "quad") -> np.ndarray:
    """``Q_t`` for a scalar ``t`` (``method="quad"``) or an array of times.

    ``"quad"`` uses adaptive vector quadrature at relative tolerance 1e-10;
    ``"vanloan"`` reads the integral off one block matrix exponential and
    accepts an array of times.
    """
    a0 = np.atleast_2d(np.asarray(a0, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    n = a0.shape[0]
    ss = sigma @ sigma.T
    if method == "vanloan":
        t = np.asarray(t, dtype=float)
        block = np.zeros((2 * n, 2 * n))
        block[:n, :n] = -a0
        block[:n, n:] = ss
        block[n:, n:] = a0.T
        big = expm(t[..., None, None] * block)
        q = np.swapaxes(big[..., n:, n:], -1, -2) @ big[..., :n, n:]
        return 0.5 * (q + np.swapaxes(q, -1, -2))
    if method != "quad":
        raise ValueError(f"unknown covariance method {method!r}")
    t = float(t)
    if t <= 0.0:
        return np.zeros((n, n))
    if not np.any(a0):
        return t * ss

    def integrand(s):
        e = mat_exp(s, a0)
        return (e @ ss @ e.T).ravel()

    val, _ = integrate.quad_vec(integrand, 0.0, t, epsrel=1e-10, epsabs=0.0)
    q = val.reshape(n, n)
    return 0.5 * (q + q.T)


@dataclass(frozen=True)
class GaussKernel:
    """``N(0, Q0)`` together with its whitening factors.

    ``factor`` (``n x rank``) maps standard normal ``w`` to ``z = factor @ w``;
    ``inv_factor`` (``n x rank``) satisfies ``inv_factor^T z = w`` on the range.
    ``sqrtQ0`` and ``pinv_sqrtQ0`` are the symmetric square root and its
    pseudo-inverse.
    """

    t: float
    Q0: np.ndarray
    sqrtQ0: np.ndarray
    pinv_sqrtQ0: np.ndarray
    rank: int
    factor: np.ndarray
    inv_factor: np.ndarray
    basis: np.ndarray
    quad: QuadRule = field(default_factory=QuadRule)

    @classmethod
    def from_covariance(cls, t: float, Q0, quad: Optional[QuadRule] = None) -> "GaussKernel":
        Q0 = np.atleast_2d(np.asarray(Q0, dtype=float))
        Q0 = 0.5 * (Q0 + Q0.T)
        lam, vec = np.linalg.eigh(Q0)
        top = max(float(lam.max()), 0.0)
        keep = lam > RANK_CUTOFF * top if top > 0 else np.zeros(len(lam), bool)
        lam_c = np.where(keep, lam, 0.0)
        root = np.sqrt(lam_c)
        sqrtQ0 = (vec * root) @ vec.T
        inv_root = np.where(keep, 1.0 / np.where(keep, root, 1.0), 0.0)
        pinv = (vec * inv_root) @ vec.T
        basis = vec[:, keep]
        return cls(t=float(t), Q0=Q0, sqrtQ0=sqrtQ0, pinv_sqrtQ0=pinv,
                   rank=int(keep.sum()), factor=basis * root[keep],
                   inv_factor=basis / root[keep], basis=basis,
                   quad=quad or QuadRule())

    @property
    def n(self) -> int:
        return self.Q0.shape[0]

    @property
    def lambda_max(self) -> float:
        return float(np.max(np.linalg.eigvalsh(self.Q0))) if self.n else 0.0

    def membership_residual(self, v) -> float:
        """Distance of ``v`` (vector or matrix columns) from the range of ``Q0``."""
        v = np.asarray(v, dtype=float)
        proj = self.basis @ (self.basis.T @ v)
        return float(np.linalg.norm(v - proj))

    def in_range(self, v) -> bool:
        v = np.asarray(v, dtype=float)
        return self.membership_residual(v) <= MEMBERSHIP_TOL * max(1.0, float(np.linalg.norm(v)))

    def whitened(self, v) -> np.ndarray:
        """``inv_factor^T v``; its norm equals ``|pinv_sqrtQ0 v|``."""
        return self.inv_factor.T @ np.asarray(v, dtype=float)

    def nodes(self):
        """Shifts ``z_q`` (``(q, n)``), whitened nodes ``w_q`` and weights."""
        w, wts = self.quad.nodes(self.rank)
        return w @ self.factor.T, w, wts


def compute_Q0(t: float, spec: ProblemSpec, quad: Optional[QuadRule] = None,
               method: str = "quad") -> GaussKernel:
    """Kernel of the projected Ornstein-Uhlenbeck transition at time ``t``."""
    if t < 0:
        from .errors import DomainError
        raise DomainError("t must be non-negative")
    return GaussKernel.from_covariance(t, covariance(t, spec.a0, spec.sigma, method), quad)


# --------------------------------------------------------------------------
# controllability


@dataclass(frozen=True)
class KalmanReport:
    controllable: bool
    r: Optional[int]
    fitted_slope: Optional[float]
    ranks: tuple = ()

    def to_dict(self) -> dict:
        return {"controllable": self.controllable, "r": self.r,
                "fitted_slope": self.fitted_slope, "ranks": list(self.ranks)}


def inverse_sqrt_norm(t, a0, sigma) -> np.ndarray:
    """``|Q_t^{-1/2}|`` for an array of times (``inf`` where singular)."""
    q = covariance(np.asarray(t, dtype=float), a0, sigma, method="vanloan")
    lam = np.linalg.eigvalsh(q)
    lo = lam[..., 0]
    hi = lam[..., -1]
    with np.errstate(divide="ignore"):
        return np.where(lo > RANK_CUTOFF * hi, 1.0 / np.sqrt(np.maximum(lo, 1e-300)), np.inf)


def loglog_slope(t, values) -> float:
    """Least-squares slope of ``log values`` against ``log t``."""
    slope, _ = np.polyfit(np.log(t), np.log(values), 1)
    return float(slope)


def kalman(spec: ProblemSpec, t_lo: float = 1e-3, t_hi: float = 1e-1,
           num: int = 20) -> KalmanReport:
    """Kalman rank test for ``(a0, sigma)`` and the blow-up rate of ``|Q_t^{-1/2}|``."""
    n = spec.n
    blocks = []
    ranks = []
    power = spec.sigma
    r = None
    for j in range(n):
        blocks.append(power)
        rank = int(np.linalg.matrix_rank(np.hstack(blocks)))
        ranks.append(rank)
        if rank == n and r is None:
            r = j
        power = spec.a0 @ power
    controllable = r is not None
    slope = None
    if controllable:
        ts = np.geomspace(t_lo, t_hi, num)
        slope = loglog_slope(ts, inverse_sqrt_norm(ts, spec.a0, spec.sigma))
    return KalmanReport(controllable, r, slope, tuple(ranks))


def _in_image(mat, sigma) -> bool:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.size == 0:
        return True
    coef, *_ = np.linalg.lstsq(sigma, mat, rcond=None)
    resid = np.linalg.norm(mat - sigma @ coef)
    return bool(resid <= MEMBERSHIP_TOL * max(1.0, float(np.linalg.norm(mat))))


def check_image_conditions(spec: ProblemSpec, num_t: int = 41) -> str:
    """Which of the two range conditions holds (checked on a time grid).

    ``"HoldsVia_hpdebreg"``: ``e^{t a0} b0`` and every density sample and atom
    weight of ``b1`` lie in ``Im sigma``. ``"HoldsVia_hpdebregbis"``: the
    combined matrix ``(e^{tA}B)_0`` lies in ``Im sigma`` for every sampled
    ``t``. Otherwise ``"Fails"``.
    """
    ts = np.linspace(0.0, spec.T, num_t)[1:]
    direct = all(_in_image(mat_exp(t, spec.a0) @ spec.b0, spec.sigma) for t in ts)
    if direct:
        dens = spec.b1.density_samples()
        direct = all(_in_image(v, spec.sigma) for v in dens)
        direct = direct and all(_in_image(c, spec.sigma) for _, c in spec.b1.atoms)
    if direct:
        return "HoldsVia_hpdebreg"
    knots = set(ts.tolist())
    knots.update(-loc for loc, _ in spec.b1.atoms if 0 < -loc <= spec.T)
    if all(_in_image(etAB_0(t, spec), spec.sigma) for t in sorted(knots)):
        return "HoldsVia_hpdebregbis"
    return "Fails"


# --------------------------------------------------------------------------
# kernel evaluators


def _points(kernel: GaussKernel, y):
    y = np.asarray(y, dtype=float)
    z, w, wts = kernel.nodes()
    return y[..., None, :] + z, w, wts


def smooth_apply(t: float, phi_bar: Callable, y, kernel: GaussKernel) -> np.ndarray:
    """``E phi_bar(y + z)`` with ``z ~ N(0, Q_t)``; ``y`` may be a batch ``(..., n)``."""
    y = np.asarray(y, dtype=float)
    if t == 0.0 or kernel.rank == 0:
        return np.asarray(phi_bar(y), dtype=float)
    pts, _, wts = _points(kernel, y)
    return np.asarray(phi_bar(pts), dtype=float) @ wts


def _weighted_moment(phi_bar, y, kernel):
    """``E[phi_bar(y + F w) w]`` of shape ``(..., rank)``."""
    pts, w, wts = _points(kernel, y)
    vals = np.asarray(phi_bar(pts), dtype=float)
    return np.einsum("...q,qr,q->...r", vals, w, wts)


def whitened_control_matrix(t: float, spec: ProblemSpec, kernel: GaussKernel,
                            bmat: Optional[np.ndarray] = None) -> np.ndarray:
    """``inv_factor^T (e^{tA}B)_0`` (``rank x m``), after the range check."""
    bmat = etAB_0(t, spec) if bmat is None else np.asarray(bmat, dtype=float)
    if not np.any(bmat):
        return np.zeros((kernel.rank, bmat.shape[1]))
    if not kernel.in_range(bmat):
        raise SmoothingUnavailable(
            f"(e^{{tA}}B)_0 is not in the range of Q_t at t={t:.6g} "
            f"(residual {kernel.membership_residual(bmat):.3e})")
    return kernel.whitened(bmat)


def smooth_grad_B(t: float, phi_bar: Callable, y, kernel: GaussKernel, spec: ProblemSpec,
                  bmat: Optional[np.ndarray] = None) -> np.ndarray:
    """B-directional gradient of the smoothed terminal cost, shape ``(..., m)``.

    ``<grad_B, k> = E[phi_bar(y + z) <Q^{-1/2} (e^{tA}B)_0 k, Q^{-1/2} z>]``.
    """
    if t <= 0.0:
        raise SmoothingUnavailable("B-gradient kernel needs t > 0")
    cw = whitened_control_matrix(t, spec, kernel, bmat)
    if kernel.rank == 0:
        return np.zeros(np.shape(y)[:-1] + (cw.shape[1],))
    return _weighted_moment(phi_bar, y, kernel) @ cw


def smooth_grad_full(t: float, phi_bar: Callable, y, kernel: GaussKernel) -> np.ndarray:
    """Vector ``g`` with ``<grad R_t phi(x), h> = g . (e^{tA} h)_0``; needs ``Q_t`` invertible."""
    if t <= 0.0 or kernel.rank < kernel.n:
        raise SmoothingUnavailable("full gradient kernel needs an invertible covariance")
    return _weighted_moment(phi_bar, y, kernel) @ kernel.inv_factor.T


def smooth_hess_B(t: float, phi_grad: Callable, y, kernel: GaussKernel, spec: ProblemSpec,
                  ordering: str = "BN", phi_bar: Optional[Callable] = None,
                  bmat: Optional[np.ndarray] = None) -> np.ndarray:
    """Mixed second derivative as an ``(..., n, m)`` matrix ``H``.

    The bilinear form is ``(h, k) -> (e^{tA}h)_0^T H k``.

    ``ordering="BN"`` differentiates the gradient of ``phi_bar`` along the
    B-kernel: ``H = E[grad phi_bar(y+z) w^T] C`` with ``C`` the whitened
    control matrix. ``ordering="NB"`` uses values of ``phi_bar`` only and the
    second-order Gaussian kernel ``H = F^+ E[phi_bar (w w^T - I)] C``; it needs
    ``Q_t`` invertible. The two agree by Gaussian integration by parts.
    """
    cw = whitened_control_matrix(t, spec, kernel, bmat)
    pts, w, wts = _points(kernel, y)
    if ordering == "BN":
        grads = np.asarray(phi_grad(pts), dtype=float)
        mom = np.einsum("...qi,qr,q->...ir", grads, w, wts)
        return mom @ cw
    if ordering == "NB":
        if kernel.rank < kernel.n or phi_bar is None:
            raise SmoothingUnavailable("NB ordering needs phi_bar and an invertible covariance")
        vals = np.asarray(phi_bar(pts), dtype=float)
        outer = w[:, :, None] * w[:, None, :] - np.eye(kernel.rank)
        mom = np.einsum("...q,qrs,q->...rs", vals, outer, wts)
        return kernel.inv_factor @ mom @ cw
    raise ValueError(f"unknown ordering {ordering!r}")


# --------------------------------------------------------------------------
# minimal energy


@dataclass(frozen=True)
class EnergyReport:
    t: float
    operator_norm: float
    explicit_energy: float
    route: str

    def to_dict(self) -> dict:
        return {"t": self.t, "operator_norm": self.operator_norm,
                "explicit_energy": self.explicit_energy, "route": self.route}


def _explicit_control_energy(t: float, spec: ProblemSpec) -> float:
    """Largest eigenvalue of ``int_0^t U(s)^T U(s) ds`` for the direct steering control.

    ``U(s) = -(1/t) sigma^+ e^{s a0} b0 - sigma^+ b1(-s) 1[s <= d]``.
    """
    spinv = np.linalg.pinv(spec.sigma)
    cuts = {0.0, t}
    if spec.b1.has_density:
        cuts.update(float(-b) for b in spec.b1.breakpoints if 0 < -b < t)
        if spec.d < t:
            cuts.add(spec.d)
    cuts = sorted(cuts)
    gram = np.zeros((spec.m, spec.m))
    nodes, weights = np.polynomial.legendre.leggauss(40)
    for a, b in zip(cuts[:-1], cuts[1:]):
        s = a + 0.5 * (b - a) * (nodes + 1)
        w = 0.5 * (b - a) * weights
        ctrl = -(spinv @ (mat_exp(s, spec.a0) @ spec.b0)) / t
        ctrl = ctrl - spinv @ spec.b1.density(-s)
        gram += np.einsum("q,qki,qkj->ij", w, ctrl, ctrl)
    return float(np.max(np.linalg.eigvalsh(gram))) if spec.m else 0.0


def min_energy_bound(t: float, spec: ProblemSpec, kernel: Optional[GaussKernel] = None) -> EnergyReport:
    """``|Q_t^{-1/2} (e^{tA}B)_0|`` and the energy of an explicit steering control.

    The direct control is used when ``e^{s a0} b0`` and the density of ``b1``
    lie in ``Im sigma`` and no atom of ``b1`` is active at time ``t``;
    otherwise the Gramian control ``-sigma^T e^{(t-s) a0^T} Q_t^+ (e^{tA}B)_0``,
    whose energy equals the squared operator norm.
    """
    if t <= 0:
        raise SmoothingUnavailable("minimal energy needs t > 0")
    kernel = kernel or compute_Q0(t, spec)
    bmat = etAB_0(t, spec)
    cw = whitened_control_matrix(t, spec, kernel, bmat)
    op = float(np.linalg.norm(cw, 2)) if cw.size else 0.0
    atom_active = any(loc >= -t - 1e-12 for loc, c in spec.b1.atoms if np.any(c))
    route = "gramian"
    if not atom_active and check_image_conditions(spec) == "HoldsVia_hpdebreg":
        route = "direct"
        energy = _explicit_control_energy(t, spec)
    else:
        energy = op ** 2
    return EnergyReport(float(t), op, energy, route)


def cameron_martin_density(kernel: GaussKernel, shift, z) -> np.ndarray:
    """``dN(shift, Q)/dN(0, Q)`` evaluated at ``z`` (batch ``(..., n)``)."""
    shift = np.asarray(shift, dtype=float)
    if not kernel.in_range(shift):
        raise SmoothingUnavailable("shift outside the Cameron-Martin space: measures are singular")
    a = kernel.whitened(shift)
    zw = np.asarray(z, dtype=float) @ kernel.inv_factor
    return np.exp(zw @ a - 0.5 * a @ a)
