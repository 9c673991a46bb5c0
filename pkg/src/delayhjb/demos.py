"""Small reference problems used by the tests, the acceptance suite and the CLI."""

from __future__ import annotations

import numpy as np

from .model import (ControlSet, CostSpec, DelayMeasure, ProblemSpec, QuadraticControlCost)


def bump_terminal(y):
    return 2.0 * (1.0 - np.exp(-np.sum(np.asarray(y) ** 2, axis=-1)))


def bump_terminal_grad(y):
    y = np.asarray(y, dtype=float)
    return 4.0 * np.exp(-np.sum(y ** 2, axis=-1))[..., None] * y


def bump_running(t, y):
    return 0.5 * (1.0 - np.exp(-np.sum(np.asarray(y) ** 2, axis=-1)))


def bump_running_grad(t, y):
    y = np.asarray(y, dtype=float)
    return np.exp(-np.sum(y ** 2, axis=-1))[..., None] * y


def _bump_cost(running: bool = True) -> CostSpec:
    kw = {}
    if running:
        kw = dict(running=bump_running, running_bound=0.5, running_grad=bump_running_grad,
                  running_spatially_constant=False)
    return CostSpec(control=QuadraticControlCost([[1.0]]), terminal=bump_terminal,
                    terminal_bound=2.0, terminal_grad=bump_terminal_grad, **kw)


def scalar_demo(running: bool = True, y0: float = 0.3, u0: float = 0.5) -> ProblemSpec:
    """Distributed delay: ``b1`` has constant density 1 on ``[-0.5, 0]``."""
    d = 0.5
    return ProblemSpec(
        a0=[[0.0]], b0=[[1.0]], sigma=[[1.0]], b1=DelayMeasure.constant(d, [[1.0]]),
        d=d, T=1.0, U=ControlSet.box([-1.0], [1.0]), cost=_bump_cost(running),
        y0=[y0], u0=[u0], name="scalar-distributed-delay")


def pointwise_demo(running: bool = True, y0: float = 0.3, u0: float = 0.5) -> ProblemSpec:
    """Pointwise delay ``b1 = 0.8 delta_{-d}``."""
    d = 0.5
    return ProblemSpec(
        a0=[[0.0]], b0=[[1.0]], sigma=[[1.0]], b1=DelayMeasure.dirac(d, -d, [[0.8]]),
        d=d, T=1.0, U=ControlSet.box([-1.0], [1.0]), cost=_bump_cost(running),
        y0=[y0], u0=[u0], name="scalar-pointwise-delay")


def kalman_demo() -> ProblemSpec:
    """``n = 2`` with noise on the first coordinate only (Kalman exponent 1)."""
    d = 0.5
    cost = CostSpec(control=QuadraticControlCost([[1.0]]), terminal=bump_terminal,
                    terminal_bound=2.0, terminal_grad=bump_terminal_grad)
    return ProblemSpec(
        a0=[[0.0, 0.0], [1.0, 0.0]], b0=[[1.0], [0.0]], sigma=[[1.0], [0.0]],
        b1=DelayMeasure.constant(d, [[0.5], [0.0]]), d=d, T=1.0,
        U=ControlSet.box([-1.0], [1.0]), cost=cost, y0=[0.2, -0.1], u0=[0.5],
        name="two-dimensional-degenerate-noise")


def closed_form_demo(y0: float = 0.3, u0: float = 0.5) -> ProblemSpec:
    """``U = {0}``: ``H_min = 0``, terminal ``y^2`` so ``v = y^2 + (T - t)``."""
    d = 0.5
    cost = CostSpec(control=QuadraticControlCost([[1.0]]),
                    terminal=lambda y: np.sum(np.asarray(y) ** 2, axis=-1),
                    terminal_growth=2, terminal_grad=lambda y: 2.0 * np.asarray(y))
    return ProblemSpec(
        a0=[[0.0]], b0=[[1.0]], sigma=[[1.0]], b1=DelayMeasure.constant(d, [[1.0]]),
        d=d, T=1.0, U=ControlSet.finite([[0.0]]), cost=cost, y0=[y0], u0=[u0],
        name="closed-form-pure-smoothing")


DEMOS = {
    "scalar": scalar_demo,
    "pointwise": pointwise_demo,
    "kalman": kalman_demo,
    "closed_form": closed_form_demo,
}
