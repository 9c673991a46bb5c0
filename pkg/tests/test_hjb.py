import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delayhjb.demos import closed_form_demo
from delayhjb.errors import DomainError, SingularityError
from delayhjb.hjb import (GridConfig, ReducedValueField, beta_quadrature, evaluate_v, grad_B_v,
                          grad_B_grad_v, interp_multilinear, mollify, picard_solve, weighted_norm)
from delayhjb.model import (ControlSet, CostSpec, DelayMeasure, ProblemSpec,
                            QuadraticControlCost, lift_initial)
from delayhjb.operators import AbstractState, etAB_0, reduced_coordinate


def _pure_smoothing(terminal, grad, a0=0.0, growth=2, bound=None):
    cost = CostSpec(control=QuadraticControlCost([[1.0]]), terminal=terminal, terminal_grad=grad,
                    terminal_growth=growth, terminal_bound=bound)
    return ProblemSpec(a0=[[a0]], b0=[[1.0]], sigma=[[1.0]],
                       b1=DelayMeasure.constant(0.5, [[1.0]]), d=0.5, T=1.0,
                       U=ControlSet.finite([[0.0]]), cost=cost, y0=[0.3], u0=[0.5])


def _history_state(spec, x0, fn):
    return lift_initial(spec.replace(y0=[x0], u0=fn))


HISTORIES = [
    (0.3, lambda s: np.full((len(s), 1), 0.5)),
    (-0.7, lambda s: np.cos(4 * np.asarray(s))[:, None]),
    (1.1, lambda s: (1 + 2 * np.asarray(s))[:, None]),
]


class TestBetaQuadrature:
    @pytest.mark.parametrize("t", [0.1, 0.5, 1.0])
    def test_beta_integral(self, t):
        s, lag, W = beta_quadrature(t, 24)
        assert np.sum(W / np.sqrt(s * lag)) == pytest.approx(np.pi, abs=1e-10)

    def test_smooth_integral(self):
        s, lag, W = beta_quadrature(0.8, 24)
        np.testing.assert_allclose(s + lag, 0.8)
        assert np.sum(W * np.exp(s)) == pytest.approx(np.exp(0.8) - 1, abs=1e-12)


class TestInterpolation:
    def test_exact_on_multilinear(self, rng):
        axes = [np.linspace(-1, 1, 5), np.linspace(0, 2, 7)]
        X, Y = np.meshgrid(*axes, indexing="ij")
        vals = 1 + 2 * X - Y + 0.5 * X * Y
        pts = rng.uniform([-1, 0], [1, 2], size=(20, 2))
        expect = 1 + 2 * pts[:, 0] - pts[:, 1] + 0.5 * pts[:, 0] * pts[:, 1]
        np.testing.assert_allclose(interp_multilinear(axes, vals, pts), expect, atol=1e-12)

    def test_clipped_outside(self):
        axes = [np.linspace(0, 1, 3)]
        out = interp_multilinear(axes, np.array([0.0, 1.0, 4.0]), np.array([[-5.0], [9.0]]))
        np.testing.assert_allclose(out, [0.0, 4.0])


class TestClosedForm:
    def test_grid_matches(self, closed_form_solution):
        _, fld, rep = closed_form_solution
        Y = fld.nodes()[..., 0]
        for i, t in enumerate(fld.times):
            np.testing.assert_allclose(fld.f[i], Y ** 2 + t, atol=1e-6)
        assert rep.converged

    @pytest.mark.parametrize("t", [0.0, 0.3, 0.8])
    @pytest.mark.parametrize("x0,fn", HISTORIES)
    def test_evaluate(self, closed_form_solution, t, x0, fn):
        spec, fld, _ = closed_form_solution
        x = _history_state(spec, x0, fn)
        r = reduced_coordinate(spec.T - t, x, spec.a0)[0]
        assert evaluate_v(t, x, fld) == pytest.approx(r ** 2 + spec.T - t, abs=1e-6)
        g = grad_B_v(t, x, fld)
        assert g[0] == pytest.approx(2 * r * etAB_0(spec.T - t, spec)[0, 0], abs=1e-6)

    def test_terminal_value(self, closed_form_solution):
        spec, fld, _ = closed_form_solution
        x = _history_state(spec, 0.9, HISTORIES[1][1])
        assert evaluate_v(spec.T, x, fld) == pytest.approx(0.81)
        with pytest.raises(SingularityError):
            grad_B_v(spec.T, x, fld)

    def test_outside_horizon(self, closed_form_solution):
        spec, fld, _ = closed_form_solution
        with pytest.raises(DomainError):
            evaluate_v(1.5, lift_initial(spec), fld)

    def test_history_free_depends_on_x0_only(self, closed_form_solution):
        spec, fld, _ = closed_form_solution
        a = AbstractState(np.array([0.4]), np.zeros((257, 1)), spec.d)
        assert evaluate_v(0.2, a, fld) == pytest.approx(0.16 + 0.8, abs=1e-6)


class TestConstantData:
    def test_constants_pass_through(self):
        cost = CostSpec(control=QuadraticControlCost([[1.0]]),
                        terminal=lambda y: np.full(np.shape(y)[:-1], 1.7), terminal_bound=1.7)
        spec = ProblemSpec(a0=[[0.0]], b0=[[1.0]], sigma=[[1.0]],
                           b1=DelayMeasure.constant(0.5, [[1.0]]), d=0.5, T=1.0,
                           U=ControlSet.finite([[0.5]]), cost=cost, y0=[0.0], u0=[0.0])
        fld, _ = picard_solve(spec, GridConfig(n_time=8, n_space=41))
        h0 = 0.125  # H_min(0) = l1(0.5)
        for i, t in enumerate(fld.times):
            np.testing.assert_allclose(fld.f[i], 1.7 + h0 * t, atol=1e-12)
        np.testing.assert_allclose(fld.fbar, 0.0, atol=1e-12)


class TestContraction:
    def test_ratios_below_one(self, scalar_solution):
        _, _, rep = scalar_solution
        assert rep.converged
        head = [r for r in rep.ratios[:5]]
        assert all(r < 1 for r in head)
        assert rep.contraction_bound < 1
        assert np.isfinite(rep.C_T) and rep.sup_f <= rep.a_priori_bound


class TestWeightedNorm:
    def test_zero(self):
        times = np.linspace(0, 1, 5)
        assert weighted_norm((np.zeros((5, 3)), np.zeros((5, 3, 1))), 2.0, times) == 0.0

    def test_constant(self):
        times = np.linspace(0, 1, 5)
        assert weighted_norm((np.full((5, 3), -2.5), np.zeros((5, 3, 1))), 0.0, times) == 2.5

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-5, 5), st.floats(0, 10))
    def test_homogeneous(self, alpha, eta):
        rng = np.random.default_rng(3)
        f, fb = rng.normal(size=(6, 4)), rng.normal(size=(6, 4, 1))
        times = np.linspace(0, 1, 6)
        base = weighted_norm((f, fb), eta, times)
        assert weighted_norm((alpha * f, alpha * fb), eta, times) == pytest.approx(abs(alpha) * base)


class TestExport:
    def test_round_trip(self, tmp_path, closed_form_solution):
        spec, fld, _ = closed_form_solution
        head, body = fld.export(tmp_path / "field")
        assert head.exists() and body.exists()
        back = ReducedValueField.load(tmp_path / "field", spec)
        np.testing.assert_array_equal(back.f, fld.f)
        np.testing.assert_array_equal(back.fbar, fld.fbar)
        np.testing.assert_array_equal(back.times, fld.times)
        x = lift_initial(spec)
        assert evaluate_v(0.0, x, back) == pytest.approx(evaluate_v(0.0, x, fld), abs=1e-12)


class TestSecondDerivatives:
    def test_linear_terminal_zero_form(self):
        spec = _pure_smoothing(lambda y: 2 * y[..., 0], lambda y: np.full_like(y, 2.0), growth=1)
        fld, _ = picard_solve(spec, GridConfig(n_time=8, n_space=81))
        sd = grad_B_grad_v(0.3, lift_initial(spec), fld)
        np.testing.assert_allclose(sd.matrix, 0.0, atol=1e-6)

    def test_quadratic_terminal(self):
        spec = _pure_smoothing(lambda y: 0.5 * y[..., 0] ** 2, lambda y: np.asarray(y))
        fld, _ = picard_solve(spec, GridConfig(n_time=8, n_space=81))
        x = lift_initial(spec)
        t = 0.4
        sd = grad_B_grad_v(t, x, fld)
        b = etAB_0(spec.T - t, spec)[0, 0]
        assert sd.matrix[0, 0] == pytest.approx(b, rel=1e-6)
        assert sd.asymmetry < 1e-6
        # finite differences of grad_B_v along h = (1, 0): (e^{tau A} h)_0 = 1
        h = 1e-4
        up = AbstractState(x.x0 + h, x.x1, x.d)
        dn = AbstractState(x.x0 - h, x.x1, x.d)
        fd = (grad_B_v(t, up, fld) - grad_B_v(t, dn, fld))[0] / (2 * h)
        assert sd.matrix[0, 0] == pytest.approx(fd, rel=1e-2)

    def test_bounded_scaled_norm(self, scalar_solution):
        spec, fld, _ = scalar_solution
        x = lift_initial(spec)
        scaled = [np.sqrt(spec.T - t) * np.linalg.norm(grad_B_grad_v(t, x, fld).matrix)
                  for t in (0.0, 0.5, 0.9, 0.99)]
        assert max(scaled) < 5.0

    def test_singular_at_horizon(self, closed_form_solution):
        spec, fld, _ = closed_form_solution
        with pytest.raises(SingularityError):
            grad_B_grad_v(spec.T, lift_initial(spec), fld)


class TestMollify:
    def test_smooth_function_close(self):
        fn = lambda y: np.sin(y[..., 0])  # noqa: E731
        ys = np.linspace(-2, 2, 9)[:, None]
        for width in (0.5, 0.25, 0.125):
            diff = np.max(np.abs(mollify(fn, width, 1)(ys) - fn(ys)))
            assert diff <= width * 1.0  # Lipschitz constant of sin

    def test_quadratic_exact(self):
        fn = lambda y: y[..., 0] ** 2  # noqa: E731
        ys = np.array([[0.3], [-1.0]])
        np.testing.assert_allclose(mollify(fn, 0.5, 1)(ys), ys[:, 0] ** 2 + 0.25)


def test_closed_form_demo_shape():
    spec = closed_form_demo()
    assert spec.U.kind == "finite" and spec.n == 1
