import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from delayhjb.errors import DomainError
from delayhjb.model import ControlSet, CostSpec, DelayMeasure, ProblemSpec, QuadraticControlCost
from delayhjb.operators import (AbstractState, AdjointVector, apply_adjoint_semigroup, apply_B,
                                apply_Bstar, apply_generator, apply_resolvent, apply_semigroup,
                                etAB_0, mat_exp, reduced_coordinate)

A2 = np.array([[0.2, -0.5], [0.3, -0.1]])


def _spec(b0, b1, a0=None, d=1.0):
    b0 = np.atleast_2d(b0)
    n, m = b0.shape
    return ProblemSpec(a0=np.zeros((n, n)) if a0 is None else a0, b0=b0, sigma=np.eye(n), b1=b1,
                       d=d, T=1.0, U=ControlSet.box([-1.0] * m, [1.0] * m),
                       cost=CostSpec(control=QuadraticControlCost(np.eye(m)),
                                     terminal=lambda y: 0 * y[..., 0], terminal_bound=0.0),
                       y0=np.zeros(n), u0=np.zeros(m))


def _smooth_pair(M=256, d=1.0):
    x = AbstractState.from_function([1.0, -0.5],
                                    lambda s: np.stack([np.sin(3 * s), np.cos(s)], -1), d, M)
    z = AdjointVector.from_function([0.3, 0.7], lambda s: np.stack([s ** 2, np.exp(s)], -1), d, M)
    return x, z


class TestMatExp:
    def test_zero_generator(self):
        np.testing.assert_allclose(mat_exp(3.7, np.zeros((2, 2))), np.eye(2))

    def test_scalar(self):
        assert mat_exp(1.0, [[1.0]])[0, 0] == pytest.approx(2.718281828, abs=1e-9)

    def test_nilpotent(self):
        np.testing.assert_allclose(mat_exp(2.0, [[0.0, 1.0], [0.0, 0.0]]), [[1, 2], [0, 1]],
                                   atol=1e-14)

    def test_batched(self):
        out = mat_exp(np.array([0.0, 1.0]), A2)
        assert out.shape == (2, 2, 2)
        np.testing.assert_allclose(out[0], np.eye(2))

    def test_overflow_is_domain_error(self):
        with pytest.raises(DomainError):
            mat_exp(1e6, [[1e3]])


class TestSemigroup:
    def test_identity_at_zero(self):
        x, _ = _smooth_pair()
        assert apply_semigroup(0.0, x, A2) is x

    def test_transport_example(self):
        x = AbstractState.from_function([2.0], lambda s: np.ones((len(s), 1)), 1.0, 256)
        y = apply_semigroup(0.5, x, [[0.0]])
        assert y.x0[0] == pytest.approx(2.5, abs=1e-12)
        right = y.grid > -0.5 + 1e-9
        left = y.grid < -0.5 - 1e-9
        np.testing.assert_allclose(y.x1[right], 1.0)
        np.testing.assert_allclose(y.x1[left], 0.0)

    def test_history_flushed_after_delay(self):
        x, _ = _smooth_pair()
        np.testing.assert_allclose(apply_semigroup(1.2, x, A2).x1, 0.0)

    def test_semigroup_law_on_grid(self):
        x, _ = _smooth_pair()
        two = apply_semigroup(0.125, apply_semigroup(0.25, x, A2), A2)
        one = apply_semigroup(0.375, x, A2)
        np.testing.assert_allclose(two.x1, one.x1, atol=1e-12)
        np.testing.assert_allclose(two.x0, one.x0, atol=1e-4)

    def test_negative_time(self):
        x, _ = _smooth_pair()
        with pytest.raises(DomainError):
            apply_semigroup(-0.1, x, A2)


class TestReducedCoordinate:
    def test_zero_time(self):
        x, _ = _smooth_pair()
        np.testing.assert_allclose(reduced_coordinate(0.0, x, A2), x.x0)

    def test_example_value(self):
        x = AbstractState.from_function([2.0], lambda s: np.ones((len(s), 1)), 1.0, 256)
        assert reduced_coordinate(0.5, x, [[0.0]])[0] == pytest.approx(2.5, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.0, 3.0))
    def test_history_free(self, t):
        x = AbstractState.zeros(2, 1.0)
        x = AbstractState(np.array([0.4, -1.2]), x.x1, x.d)
        np.testing.assert_allclose(reduced_coordinate(t, x, A2), mat_exp(t, A2) @ x.x0,
                                   atol=1e-12)

    def test_matches_first_component(self):
        x, _ = _smooth_pair()
        np.testing.assert_allclose(reduced_coordinate(0.3, x, A2), apply_semigroup(0.3, x, A2).x0)

    def test_against_adaptive_quadrature(self):
        x, _ = _smooth_pair(M=2048)
        t = 0.4
        exact = mat_exp(t, A2) @ x.x0
        for i in range(2):
            def integrand(s, i=i):
                seg = np.array([np.sin(3 * s), np.cos(s)])
                return (mat_exp(t + s, A2) @ seg)[i]
            exact[i] += quad(integrand, -t, 0.0)[0]
        np.testing.assert_allclose(reduced_coordinate(t, x, A2), exact, atol=1e-6)


class TestAdjoint:
    def test_identity_at_zero(self):
        _, z = _smooth_pair()
        assert apply_adjoint_semigroup(0.0, z, A2) is z

    @pytest.mark.parametrize("t", [0.25, 0.5, 0.75, 1.5])
    def test_adjointness_on_grid(self, t):
        x, z = _smooth_pair()
        lhs = apply_semigroup(t, x, A2).inner(z)
        rhs = x.inner(apply_adjoint_semigroup(t, z, A2))
        assert lhs == pytest.approx(rhs, abs=1e-8)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 300), st.floats(-1, 1), st.floats(-1, 1))
    def test_adjointness_random_grid_times(self, k, c0, c1):
        M = 256
        x = AbstractState.from_function([c0, c1], lambda s: np.stack([c1 * s, np.sin(c0 + s)], -1),
                                        1.0, M)
        z = AdjointVector.from_function([c1, 1.0], lambda s: np.stack([np.cos(s), c0 * s * s], -1),
                                        1.0, M)
        t = k / M
        lhs = apply_semigroup(t, x, A2).inner(z)
        rhs = x.inner(apply_adjoint_semigroup(t, z, A2))
        assert lhs == pytest.approx(rhs, abs=1e-8)

    def test_adjointness_off_grid_converges(self):
        errs = []
        for M in (256, 1024, 4096):
            x, z = _smooth_pair(M)
            errs.append(abs(apply_semigroup(0.37, x, A2).inner(z)
                            - x.inner(apply_adjoint_semigroup(0.37, z, A2))))
        assert errs[-1] < errs[0] and errs[-1] < 1e-5

    def test_flushed_adjoint_formula(self):
        z = AdjointVector(np.array([0.3, 0.7]), np.zeros((257, 2)), 1.0)
        t = 1.5
        out = apply_adjoint_semigroup(t, z, A2)
        expected = np.stack([mat_exp(s + t, A2.T) @ z.x0 for s in out.grid])
        np.testing.assert_allclose(out.x1, expected, atol=1e-12)


class TestResolvent:
    def test_zero(self):
        out = apply_resolvent(2.0, AbstractState.zeros(2, 1.0), A2)
        np.testing.assert_allclose(out.x0, 0.0)
        np.testing.assert_allclose(out.x1, 0.0)

    def test_scalar_history_free(self):
        x = AbstractState(np.array([1.7]), np.zeros((257, 1)), 1.0)
        out = apply_resolvent(1.0, x, [[0.0]])
        assert out.x0[0] == pytest.approx(1.7)
        np.testing.assert_allclose(out.x1, 0.0)

    def test_inverse_identity(self):
        errs = []
        for M in (512, 1024):
            x, _ = _smooth_pair(M)
            y = apply_resolvent(2.0, x, A2)
            ay = apply_generator(y, A2)
            back = AbstractState(2.0 * y.x0 - ay.x0, 2.0 * y.x1 - ay.x1, y.d)
            errs.append((back - x).norm())
        assert errs[-1] < 1e-4
        assert errs[0] / errs[1] > 3.0  # second order in the grid step

    def test_spectrum_rejected(self):
        with pytest.raises(DomainError):
            apply_resolvent(0.0, AbstractState.zeros(1, 1.0), [[0.0]])


class TestControlOperator:
    def test_etAB_at_zero(self):
        spec = _spec([[1.0]], DelayMeasure.constant(1.0, [[1.0]]))
        np.testing.assert_allclose(etAB_0(0.0, spec), [[1.0]])

    def test_atom_activation(self):
        spec = _spec([[1.0]], DelayMeasure.dirac(0.5, -0.5, [[0.8]]), d=0.5)
        np.testing.assert_allclose(etAB_0(0.3, spec), [[1.0]])
        np.testing.assert_allclose(etAB_0(0.5, spec), [[1.8]])
        np.testing.assert_allclose(etAB_0(0.7, spec), [[1.8]])

    def test_density_mass_grows_linearly(self):
        spec = _spec([[1.0]], DelayMeasure.constant(0.5, [[1.0]]), d=0.5)
        for t in (0.1, 0.3, 0.5, 0.9):
            assert etAB_0(t, spec)[0, 0] == pytest.approx(1.0 + min(t, 0.5), abs=1e-12)

    def test_apply_B_zero(self):
        spec = _spec([[1.0]], DelayMeasure.constant(1.0, [[1.0]]))
        first, meas = apply_B([0.0], spec)
        np.testing.assert_allclose(first, 0.0)
        np.testing.assert_allclose(meas.total(), 0.0)

    def test_bstar_example(self):
        spec = _spec([[2.0]], DelayMeasure.constant(1.0, [[1.0]]))
        assert apply_Bstar([3.0], lambda r: np.ones((len(r), 1)), spec)[0] == pytest.approx(7.0)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-2, 2), min_size=2, max_size=2),
           st.floats(-1, 1), st.floats(-1, 1))
    def test_duality(self, u, a, b):
        b1 = DelayMeasure(d=1.0, n=2, m=2, breakpoints=np.array([-1.0, -0.4, 0.0]),
                          values=np.array([[[1.0, 0.5], [0.0, 2.0]], [[-1.0, 0.0], [0.3, 0.2]]]),
                          atoms=((-0.7, np.array([[0.5, 0.0], [0.0, -1.0]])),))
        spec = _spec(np.array([[1.0, 0.0], [2.0, 1.0]]), b1)
        x0 = np.array([a, b])

        def seg(r):
            r = np.asarray(r)
            return np.stack([np.sin(2 * r + a), np.cos(r) * b], -1)

        u = np.asarray(u)
        first, meas = apply_B(u, spec)
        lhs = first @ x0 + meas.integrate(lambda r: seg(r)[:, None, :])[0, 0]
        assert lhs == pytest.approx(u @ apply_Bstar(x0, seg, spec), abs=1e-8)

    def test_bstar_needs_segment(self):
        spec = _spec([[1.0]], DelayMeasure.constant(1.0, [[1.0]]))
        with pytest.raises(DomainError):
            apply_Bstar([1.0], 3.0, spec)
