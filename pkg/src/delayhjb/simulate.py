"""Euler-Maruyama simulation of the controlled delay SDE and Monte Carlo verification.

Per step::

    y_{k+1} = y_k + [a0 y_k + b0 u_k + sum_j c_j u_{k-j}] dt + sigma sqrt(dt) xi_k

where ``c_j`` discretise ``b1``: trapezoidal weights for the density part and
exact lookups for atoms (``dt`` is shrunk so that it divides ``d`` and ``T``).
Feedback needs the reduced coordinate ``r = (e^{(T-t)A} X_t)_0``; it is
propagated by the mild form

    r_{k+1} = r_k + Mbar_k u_k dt + e^{(T - t_k) a0} sigma dW_k

with ``Mbar_k`` the average of ``(e^{(T-s)A}B)_0`` over the step.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import SimulationError
from .hamiltonian import HamiltonianSpec
from .model import ProblemSpec, lift_initial
from .operators import etAB_0, mat_exp, reduced_coordinate

_CHUNK = 2048


# --------------------------------------------------------------------------
# policies


@dataclass
class PolicyHandle:
    """Control law: ``"feedback"``, ``"constant"`` or ``"open_loop"``.

    Feedback is ``gamma(grad_B v(t, X_t))`` read from a solved field; over
    ``[T - cutoff, T]`` the last computed value is held (default two steps).
    """

    kind: str
    value: Optional[np.ndarray] = None
    fn: Optional[Callable] = None
    field: object = None
    ham: Optional[HamiltonianSpec] = None
    cutoff: Optional[float] = None
    name: str = ""

    @classmethod
    def feedback(cls, fld, ham: Optional[HamiltonianSpec] = None, cutoff: Optional[float] = None):
        return cls("feedback", field=fld, ham=ham, cutoff=cutoff, name="feedback")

    @classmethod
    def constant(cls, u, name: str = ""):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return cls("constant", value=u, name=name or f"constant{u.tolist()}")

    @classmethod
    def open_loop(cls, fn: Callable, name: str = "open_loop"):
        return cls("open_loop", fn=fn, name=name)

    @classmethod
    def random_open_loop(cls, spec: ProblemSpec, seed: int = 0, blocks: int = 10):
        """Open-loop control piecewise constant on ``blocks`` intervals, values drawn in ``U``."""
        vals = spec.U.sample(blocks, np.random.default_rng(seed))
        T = spec.T

        def fn(t):
            return vals[min(int(t / T * blocks), blocks - 1)]

        return cls.open_loop(fn, name="random_open_loop")


# --------------------------------------------------------------------------
# discretisation helpers


def adjust_step(dt: float, d: float, T: float) -> tuple[float, int, int]:
    """Largest step ``<= dt`` dividing both ``d`` and ``T``; returns ``(dt, steps, lags)``."""
    if dt <= 0:
        raise SimulationError("dt must be positive")
    n_d = int(np.ceil(d / dt - 1e-9))
    for extra in range(0, 100000):
        lags = n_d + extra
        step = d / lags
        steps = T / step
        if abs(steps - round(steps)) < 1e-9 * max(1.0, steps):
            return step, int(round(steps)), lags
    raise SimulationError("no common step divides both d and T")


def delay_weights(spec: ProblemSpec, dt: float, lags: int) -> np.ndarray:
    """``c_j`` (``(lags + 1, n, m)``) with ``int b1(dxi) u(t + xi) ~ sum_j c_j u(t - j dt)``."""
    j = np.arange(lags + 1)
    trap = np.full(lags + 1, dt)
    trap[0] = trap[-1] = 0.5 * dt
    c = spec.b1.density(-j * dt) * trap[:, None, None]
    for loc, weight in spec.b1.atoms:
        c[int(round(-loc / dt))] += weight
    return c


def _runs(c: np.ndarray):
    """Group consecutive equal weights: list of ``(start, stop, matrix)``."""
    runs = []
    start = 0
    for j in range(1, len(c) + 1):
        if j == len(c) or not np.array_equal(c[j], c[start]):
            if np.any(c[start]):
                runs.append((start, j - 1, c[start]))
            start = j
    return runs


def averaged_control_matrices(spec: ProblemSpec, dt: float, steps: int) -> np.ndarray:
    """``Mbar_k = (1/dt) int_{t_k}^{t_{k+1}} (e^{(T-s)A}B)_0 ds`` by 4-point Gauss-Legendre."""
    x, w = np.polynomial.legendre.leggauss(4)
    out = np.zeros((steps, spec.n, spec.m))
    for k in range(steps):
        lo = spec.T - (k + 1) * dt
        for xi, wi in zip(x, w):
            tau = lo + 0.5 * dt * (xi + 1.0)
            out[k] += 0.5 * wi * etAB_0(max(tau, 0.0), spec)
    return out


# --------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectoryBatch:
    """Per-path outputs of :func:`integrate`; arrays are indexed by path first."""

    dt: float
    steps: int
    n_paths: int
    seed: int
    dt_requested: float
    y_final: np.ndarray
    r_final: np.ndarray
    running_cost: np.ndarray
    control_cost: np.ndarray
    terminal_cost: np.ndarray
    identity_integral: np.ndarray
    projections: int
    policy: str
    cutoff: float
    snapshots: dict = field(default_factory=dict)
    paths: Optional[np.ndarray] = None
    controls: Optional[np.ndarray] = None
    buffer: Optional[np.ndarray] = None

    @property
    def J(self) -> np.ndarray:
        return self.running_cost + self.control_cost + self.terminal_cost

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def summary(self) -> dict:
        mean, se = estimate_cost(self)
        return {"policy": self.policy, "dt": self.dt, "dt_requested": self.dt_requested,
                "steps": self.steps, "n_paths": self.n_paths, "seed": self.seed,
                "J_mean": mean, "J_se": se, "projections": self.projections,
                "cutoff": self.cutoff}

    def export_csv(self, path, thin: int = 1) -> Path:
        """One row per recorded sample time per path (needs ``record=True``)."""
        if self.paths is None:
            raise SimulationError("trajectories were not recorded")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        n = self.paths.shape[-1]
        with path.open("w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["path", "t"] + [f"y{i}" for i in range(n)])
            times = self.times
            for p in range(self.paths.shape[1]):
                for k in range(0, self.steps + 1, thin):
                    out.writerow([p, f"{times[k]:.17g}"] + [f"{v:.17g}" for v in self.paths[k, p]])
        return path


def _path_normals(seed: int, first: int, count: int, steps: int, k: int) -> np.ndarray:
    """Standard normals ``(steps, count, k)`` from per-path counter-based streams."""
    out = np.empty((steps, count, k))
    for i in range(count):
        ss = np.random.SeedSequence(seed, spawn_key=(first + i,))
        gen = np.random.Generator(np.random.Philox(ss))
        out[:, i, :] = gen.standard_normal((steps, k))
    return out


def integrate(spec: ProblemSpec, policy: PolicyHandle, dt: float, n_paths: int, seed: int = 0,
              record: bool = False, snapshot_times=(), identity_field=None) -> TrajectoryBatch:
    """Simulate ``n_paths`` paths of the controlled delay SDE from ``(y0, u0)``.

    ``identity_field`` (defaults to the policy's field) is used to accumulate
    ``int [H_min(p) - H_CV(p; u)] ds`` with ``p = grad_B v`` along each path.
    """
    step, steps, lags = adjust_step(dt, spec.d, spec.T)
    fld = policy.field if policy.kind == "feedback" else identity_field
    if policy.kind == "feedback" and fld is None:
        raise SimulationError("feedback policy requested without a solved field")
    ham = policy.ham or (getattr(fld, "ham", None) if fld is not None else None)
    if fld is not None and ham is None:
        ham = HamiltonianSpec.from_problem(spec)
    cutoff = policy.cutoff if policy.cutoff is not None else 2.0 * step
    c = delay_weights(spec, step, lags)
    runs = _runs(c) if spec.b1.kind == "piecewise_constant" else None
    need_r = fld is not None
    if need_r:
        mbar = averaged_control_matrices(spec, step, steps)
        noise_map = np.stack([mat_exp(spec.T - k * step, spec.a0) @ spec.sigma for k in range(steps)])
        r0 = reduced_coordinate(spec.T, lift_initial(spec), spec.a0)
    hist_times = -np.arange(lags, 0, -1) * step
    hist = spec.history(hist_times) if lags else np.zeros((0, spec.m))
    snap_steps = {int(round(t / step)): t for t in snapshot_times}

    chunks = []
    for first in range(0, n_paths, _CHUNK):
        P = min(_CHUNK, n_paths - first)
        xi = _path_normals(seed, first, P, steps, spec.k)
        size = lags + 2
        ring = np.zeros((size, P, spec.m))
        for j in range(lags):
            ring[(j - lags) % size] = hist[j]
        y = np.broadcast_to(spec.y0, (P, spec.n)).copy()
        r = np.broadcast_to(r0, (P, spec.n)).copy() if need_r else None
        run_cost = np.zeros(P)
        ctrl_cost = np.zeros(P)
        ident = np.zeros(P)
        projections = 0
        held = None
        snaps = {}
        traj = np.zeros((steps + 1, P, spec.n)) if record else None
        ctrls = np.zeros((steps, P, spec.m)) if record else None
        if record:
            traj[0] = y
        window = None
        if runs is not None:
            window = [sum(ring[(-j) % size] for j in range(max(a, 1), b + 1)) if b >= 1 else
                      np.zeros((P, spec.m)) for a, b, _ in runs]
        l0_prev = np.asarray(spec.cost.running(0.0, y), dtype=float)
        for k in range(steps):
            t = k * step
            tau = spec.T - t
            p = None
            if need_r:
                p = fld.bgrad(tau, r) / np.sqrt(tau)
            if policy.kind == "feedback":
                if tau > cutoff + 1e-12 or held is None:
                    u = ham.gamma(p)
                    held = u
                else:
                    u = held
            elif policy.kind == "constant":
                u = np.broadcast_to(policy.value, (P, spec.m))
            else:
                u = np.broadcast_to(np.asarray(policy.fn(t), dtype=float), (P, spec.m))
            inside = spec.U.contains(u)
            if not np.all(inside):
                projections += int(np.sum(~inside))
                u = spec.U.project(u)
            u = np.array(u, dtype=float)
            ring[k % size] = u
            # delay integral
            if runs is not None:
                delay = np.zeros((P, spec.n))
                for idx, (a, b, mat) in enumerate(runs):
                    if a == 0:
                        # run containing the current control: window holds lags 1..b
                        total = window[idx] + u
                    else:
                        total = window[idx]
                    delay += total @ mat.T
            else:
                delay = np.zeros((P, spec.n))
                for j in range(lags + 1):
                    if np.any(c[j]):
                        delay += ring[(k - j) % size] @ c[j].T
            drift = y @ spec.a0.T + u @ spec.b0.T + delay
            dw = np.sqrt(step) * xi[k]
            y_new = y + drift * step + dw @ spec.sigma.T
            ctrl_cost += np.asarray(spec.cost.control(u), dtype=float) * step
            l0_new = np.asarray(spec.cost.running(t + step, y_new), dtype=float)
            run_cost += 0.5 * (l0_prev + l0_new) * step
            l0_prev = l0_new
            if need_r:
                ident += (ham.h_min(p) - (np.sum(p * u, axis=-1) + ham.l1(u))) * step
                r = r + u @ mbar[k].T * step + dw @ noise_map[k].T
            # slide windows: lag j at step k+1 is the control of step k+1-j
            if runs is not None:
                for idx, (a, b, mat) in enumerate(runs):
                    lo_lag = max(a, 1)
                    if b < 1:
                        continue
                    enter = ring[(k + 1 - lo_lag) % size]
                    leave = ring[(k - b) % size]
                    window[idx] = window[idx] + enter - leave
            y = y_new
            if record:
                traj[k + 1] = y
                ctrls[k] = u
            if (k + 1) in snap_steps:
                snaps[snap_steps[k + 1]] = y.copy()
        term = np.asarray(spec.cost.terminal(y), dtype=float)
        chunks.append(dict(y=y, r=(r if need_r else y), run=run_cost, ctrl=ctrl_cost,
                           term=term, ident=ident, proj=projections, snaps=snaps,
                           traj=traj, ctrls=ctrls, ring=ring))

    def cat(key):
        return np.concatenate([ch[key] for ch in chunks], axis=0)

    snaps = {t: np.concatenate([ch["snaps"][t] for ch in chunks], axis=0)
             for t in snap_steps.values()}
    return TrajectoryBatch(
        dt=step, steps=steps, n_paths=n_paths, seed=seed, dt_requested=dt,
        y_final=cat("y"), r_final=cat("r"), running_cost=cat("run"), control_cost=cat("ctrl"),
        terminal_cost=cat("term"), identity_integral=cat("ident"),
        projections=sum(ch["proj"] for ch in chunks), policy=policy.name or policy.kind,
        cutoff=cutoff, snapshots=snaps,
        paths=(np.concatenate([ch["traj"] for ch in chunks], axis=1) if record else None),
        controls=(np.concatenate([ch["ctrls"] for ch in chunks], axis=1) if record else None),
        buffer=chunks[-1]["ring"],
    )


def _mean_se(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        raise SimulationError("no paths to average")
    if np.all(values == values[0]):
        return float(values[0]), 0.0
    mean = float(np.mean(values))
    se = float(np.std(values, ddof=1) / np.sqrt(len(values)))
    return mean, se


def estimate_cost(batch: TrajectoryBatch) -> tuple[float, float]:
    """Mean cost over paths and its standard error."""
    return _mean_se(batch.J)


@dataclass
class IdentityResult:
    residual: float
    residual_se: float
    J: float
    J_se: float
    v: float
    gap: float
    batch: TrajectoryBatch

    def to_dict(self) -> dict:
        return {"residual": self.residual, "residual_se": self.residual_se, "J": self.J,
                "J_se": self.J_se, "v": self.v, "gap": self.gap,
                "policy": self.batch.policy, "dt": self.batch.dt}


def fundamental_identity_residual(spec: ProblemSpec, fld, policy: PolicyHandle, dt: float,
                                  n_paths: int, seed: int = 0, v: Optional[float] = None,
                                  running: str = "pullback") -> IdentityResult:
    """Monte Carlo estimate of ``J + E int [H_min - H_CV] ds - v(0, x)``."""
    from .hjb import evaluate_v

    if v is None:
        v = evaluate_v(0.0, lift_initial(spec), fld, running=running)
    batch = integrate(spec, policy, dt, n_paths, seed, identity_field=fld)
    res, res_se = _mean_se(batch.J + batch.identity_integral - v)
    J, J_se = estimate_cost(batch)
    return IdentityResult(res, res_se, J, J_se, v, J - v, batch)


@dataclass
class RankingRow:
    name: str
    J: float
    se: float
    ci_low: float
    ci_high: float
    gap_to_v: float
    diff_vs_feedback: Optional[float] = None
    paired_se: Optional[float] = None
    pooled_se: Optional[float] = None


@dataclass
class RankingTable:
    rows: list
    v: Optional[float]
    common_random_numbers: bool
    dt: float
    n_paths: int
    seed: int

    def best(self) -> RankingRow:
        return self.rows[0]

    def row(self, name: str) -> RankingRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def feedback_dominates(self, name: str = "feedback", k: float = 3.0) -> bool:
        """Feedback cost <= every other candidate's cost + k pooled standard errors."""
        fb = self.row(name)
        return all(fb.J <= r.J + k * np.hypot(fb.se, r.se) for r in self.rows if r.name != name)

    def to_dict(self) -> dict:
        return {"v": self.v, "common_random_numbers": self.common_random_numbers,
                "dt": self.dt, "n_paths": self.n_paths, "seed": self.seed,
                "ranking": [vars(r) for r in self.rows]}


def compare_policies(spec: ProblemSpec, fld, candidates: dict, dt: float, n_paths: int,
                     seed: int = 0, v: Optional[float] = None,
                     reference: str = "feedback") -> RankingTable:
    """Rank candidate policies by Monte Carlo cost using common random numbers."""
    from .hjb import evaluate_v

    if v is None and fld is not None:
        v = evaluate_v(0.0, lift_initial(spec), fld)
    batches = {name: integrate(spec, pol, dt, n_paths, seed) for name, pol in candidates.items()}
    ref = batches.get(reference)
    rows = []
    for name, b in batches.items():
        J, se = estimate_cost(b)
        row = RankingRow(name, J, se, J - 1.96 * se, J + 1.96 * se,
                         (J - v) if v is not None else float("nan"))
        if ref is not None and name != reference:
            diff, pse = _mean_se(ref.J - b.J)
            row.diff_vs_feedback = diff
            row.paired_se = pse
            row.pooled_se = float(np.hypot(se, estimate_cost(ref)[1]))
        rows.append(row)
    rows.sort(key=lambda r: r.J)
    step = adjust_step(dt, spec.d, spec.T)[0]
    return RankingTable(rows, v, True, step, n_paths, seed)


def write_json(obj: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float))
    return path
