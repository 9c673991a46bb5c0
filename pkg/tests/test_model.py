import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delayhjb.demos import scalar_demo
from delayhjb.errors import DomainError, ValidationError
from delayhjb.model import (ControlSet, CostSpec, DelayMeasure, ProblemSpec,
                            QuadraticControlCost, check_hypotheses, lift_initial, load_spec,
                            spec_from_dict)


def _spec(**kw):
    base = dict(a0=[[0.0]], b0=[[1.0]], sigma=[[1.0]], b1=DelayMeasure.zero(1.0, 1, 1), d=1.0,
                T=1.0, U=ControlSet.box([-1.0], [1.0]),
                cost=CostSpec(control=QuadraticControlCost([[1.0]]), terminal=lambda y: 0 * y[..., 0],
                              terminal_bound=0.0),
                y0=[0.0], u0=[0.0])
    base.update(kw)
    return ProblemSpec(**base)


class TestDelayMeasure:
    def test_constant_density_totals(self):
        m = DelayMeasure.constant(1.0, [[2.0]])
        assert m.has_density and not m.has_atoms
        np.testing.assert_allclose(m.total(), [[2.0]])
        assert m.l2_norm() == pytest.approx(2.0)
        assert m.tv_mass() == pytest.approx(2.0)

    def test_dirac(self):
        m = DelayMeasure.dirac(0.5, -0.5, [[0.8]])
        assert m.has_atoms and not m.has_density
        np.testing.assert_allclose(m.total(), [[0.8]])

    def test_zero(self):
        assert DelayMeasure.zero(1.0, 2, 1).is_zero

    def test_density_outside_support_vanishes(self):
        m = DelayMeasure.constant(1.0, [[1.0]])
        vals = m.density(np.array([-0.3, -2.0, 0.5]))
        np.testing.assert_allclose(vals[:, 0, 0], [1.0, 0.0, 0.0])

    def test_atom_outside_window_rejected(self):
        with pytest.raises(ValidationError):
            DelayMeasure.dirac(0.5, -0.7, [[1.0]])


class TestControlSet:
    def test_box_project_contains(self):
        U = ControlSet.box([-1.0], [1.0])
        np.testing.assert_allclose(U.project(np.array([[2.0], [-0.3]])), [[1.0], [-0.3]])
        assert U.contains(np.array([0.5])) and not U.contains(np.array([1.5]))
        assert U.compact and U.radius() == pytest.approx(1.0)

    def test_finite(self):
        U = ControlSet.finite([[0.0], [2.0]])
        assert U.m == 1 and U.radius() == pytest.approx(2.0)
        np.testing.assert_allclose(U.project(np.array([1.4])), [2.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=2))
    def test_projection_lands_in_set(self, u):
        U = ControlSet.box([-1.0, 0.0], [1.0, 2.0])
        assert U.contains(U.project(np.array(u)))


class TestProblemSpec:
    def test_shape_validation(self):
        with pytest.raises(ValidationError):
            _spec(b0=[[1.0, 2.0]])

    def test_bad_horizon(self):
        with pytest.raises(ValidationError):
            _spec(T=-1.0)

    def test_history_outside_window(self):
        with pytest.raises(DomainError):
            scalar_demo().history(np.array([0.1]))

    def test_replace_keeps_other_fields(self):
        s = scalar_demo()
        r = s.replace(y0=[1.0])
        assert r.y0[0] == 1.0 and r.T == s.T and r.name == s.name


class TestLiftInitial:
    def test_zero_history(self):
        x = lift_initial(_spec(b1=DelayMeasure.constant(1.0, [[1.0]]), u0=[0.0]))
        np.testing.assert_allclose(x.x1, 0.0)

    def test_unit_density_unit_history(self):
        x = lift_initial(_spec(b1=DelayMeasure.constant(1.0, [[1.0]]), u0=[1.0]))
        np.testing.assert_allclose(x.x1[:, 0], x.grid + 1.0, atol=1e-12)

    def test_atom_history(self):
        c, d = 0.7, 1.0

        def u0(s):
            return np.sin(3 * np.asarray(s))[:, None]

        x = lift_initial(_spec(b1=DelayMeasure.dirac(d, -d, [[c]]), u0=u0))
        np.testing.assert_allclose(x.x1[:, 0], c * np.sin(3 * (-d - x.grid)), atol=1e-12)


class TestHypotheses:
    def test_scalar_report(self):
        rep = check_hypotheses(_spec())
        assert rep.controllable and rep.kalman_exponent == 0
        assert rep.image_condition == "HoldsVia_hpdebreg"
        assert rep.lipschitz_H == pytest.approx(1.0, abs=1e-9)
        assert rep.ok

    def test_identity_noise_image_holds(self):
        spec = _spec(a0=np.zeros((2, 2)), b0=[[1.0], [3.0]], sigma=np.eye(2),
                     b1=DelayMeasure.zero(1.0, 2, 1), y0=[0.0, 0.0])
        assert check_hypotheses(spec).image_condition == "HoldsVia_hpdebreg"

    def test_image_condition_fails(self):
        spec = _spec(a0=np.zeros((2, 2)), b0=[[0.0], [1.0]], sigma=[[1.0], [0.0]],
                     b1=DelayMeasure.zero(1.0, 2, 1), y0=[0.0, 0.0])
        rep = check_hypotheses(spec)
        assert rep.image_condition == "Fails"
        assert not rep.ok and rep.violations

    def test_report_serialises(self):
        json.dumps(check_hypotheses(_spec()).to_dict())


class TestJsonConfig:
    CFG = {
        "n": 1, "m": 1, "k": 1, "a0": [[0.0]], "b0": [[1.0]], "sigma": [[1.0]],
        "d": 0.5, "T": 1.0,
        "delay": {"density": {"breakpoints": [-0.5, 0.0], "values": [[[1.0]]]}},
        "control": {"box": {"lo": [-1.0], "hi": [1.0]}},
        "cost": {"terminal": {"kind": "gaussian_bump", "amplitude": 2.0,
                              "width": 0.7071067811865476}},
        "initial": {"y0": [0.3], "u0": {"constant": [0.5]}},
    }

    def test_matches_demo(self):
        spec = spec_from_dict(self.CFG)
        demo = scalar_demo(running=False)
        ys = np.linspace(-2, 2, 11)[:, None]
        np.testing.assert_allclose(spec.cost.terminal(ys), demo.cost.terminal(ys), atol=1e-14)
        np.testing.assert_allclose(lift_initial(spec).x1, lift_initial(demo).x1, atol=1e-14)

    def test_missing_key(self):
        cfg = dict(self.CFG)
        del cfg["T"]
        with pytest.raises(ValidationError):
            spec_from_dict(cfg)

    def test_expression_history(self, tmp_path):
        cfg = dict(self.CFG, initial={"y0": [0.0], "u0": {"expression": "cos(s)"}})
        path = tmp_path / "spec.json"
        path.write_text(json.dumps(cfg))
        spec = load_spec(path)
        np.testing.assert_allclose(spec.history(np.array([-0.2]))[:, 0], np.cos(-0.2))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ValidationError):
            load_spec(path)
