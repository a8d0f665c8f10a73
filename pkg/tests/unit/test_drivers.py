import math

import numpy as np
import pytest

from dynamic_deviation.drivers import (
    CvarJump,
    JumpPayoff,
    Scaled,
    ScaledJointNorm,
    ScaledSplitNorm,
    build_driver,
    check_driver_axioms,
    cvar_nu,
    lower_tail_average,
)
from dynamic_deviation.jumps import LevyMeasure
from dynamic_deviation.streams import stream


@pytest.fixture
def unit_atoms():
    return LevyMeasure(np.array([[1.0], [2.0], [0.5]]), np.ones(3))


class TestJumpPayoff:
    def test_linear(self, three_atoms):
        payoff = JumpPayoff.linear(three_atoms, np.array([2.0]))
        np.testing.assert_allclose(payoff.values, [0.2, -0.4, 0.8])
        expected = math.sqrt(1.0 * 0.04 + 0.5 * 0.16 + 2.0 * 0.64)
        assert payoff.l2_norm() == pytest.approx(expected)

    def test_arithmetic(self, three_atoms):
        payoff = JumpPayoff(np.array([1.0, 2.0, 3.0]), three_atoms)
        np.testing.assert_allclose((payoff + -payoff).values, 0.0)
        np.testing.assert_allclose((2.0 * payoff).values, [2.0, 4.0, 6.0])

    def test_size_mismatch(self, three_atoms):
        with pytest.raises(ValueError, match="atoms"):
            JumpPayoff(np.array([1.0, 2.0]), three_atoms)
        with pytest.raises(ValueError, match="direction"):
            JumpPayoff.linear(three_atoms, np.array([1.0, 1.0]))

    def test_foreign_measure_rejected(self, three_atoms):
        payoff = JumpPayoff.zero(LevyMeasure(np.array([[0.3], [0.2], [0.1]]), np.ones(3)))
        with pytest.raises(ValueError, match="different"):
            ScaledJointNorm(1.0, three_atoms).eval(np.zeros(1), payoff)


class TestLowerTail:
    def test_uniform_sample(self):
        values = np.array([3.0, -1.0, 2.0, -4.0, 0.0])
        masses = np.full(5, 0.2)
        assert lower_tail_average(values, masses, 0.4) == pytest.approx(2.5)

    def test_split_atom(self, unit_atoms):
        # smallest value -1 (mass 1) and half of 0.5: -(-1 + 0.25) / 1.5
        assert cvar_nu(1.5, [-1.0, 2.0, 0.5], unit_atoms) == pytest.approx(0.5)

    @pytest.mark.parametrize("level", [0.0, 3.0, 5.0])
    def test_level_out_of_range(self, unit_atoms, level):
        with pytest.raises(ValueError, match="level"):
            cvar_nu(level, [1.0, 2.0, 3.0], unit_atoms)


class TestDriverValues:
    def test_split_norm(self, three_atoms):
        driver = ScaledSplitNorm(2.0, 3.0, three_atoms)
        h = np.array([3.0, 4.0])
        v = np.array([1.0, 0.0, 0.5])
        assert driver(h, v) == pytest.approx(2.0 * 5.0 + 3.0 * math.sqrt(1.0 + 2.0 * 0.25))

    def test_joint_norm(self, three_atoms):
        driver = ScaledJointNorm(0.5, three_atoms)
        h = np.array([3.0, 4.0])
        v = np.array([1.0, 0.0, 0.5])
        assert driver(h, v) == pytest.approx(0.5 * math.sqrt(25.0 + 1.5))

    def test_cvar_jump_ignores_diffusion(self, unit_atoms):
        driver = CvarJump(1.5, unit_atoms)
        v = [-1.0, 2.0, 0.5]
        assert driver(np.array([10.0]), v) == driver(np.zeros(1), v) == pytest.approx(0.5)

    def test_scalar_h_is_accepted(self, three_atoms):
        driver = ScaledJointNorm(1.0, three_atoms)
        assert driver(0.3, np.zeros(3)) == pytest.approx(0.3)

    @pytest.mark.parametrize("factory", [
        lambda m: ScaledSplitNorm(0.0, 1.0, m),
        lambda m: ScaledSplitNorm(1.0, -1.0, m),
        lambda m: ScaledJointNorm(0.0, m),
        lambda m: CvarJump(0.0, m),
        lambda m: CvarJump(10.0, m),
    ])
    def test_invalid_parameters(self, three_atoms, factory):
        with pytest.raises(ValueError):
            factory(three_atoms)

    def test_growth_constants(self, three_atoms):
        assert ScaledSplitNorm(1.0, 3.0, three_atoms).growth_constant() == pytest.approx(3.0 * math.sqrt(2.0))
        assert ScaledJointNorm(0.7, three_atoms).growth_constant() == 0.7
        assert CvarJump(0.5, three_atoms).growth_constant() == pytest.approx(math.sqrt(3.5) / 0.5)


class TestScaling:
    def test_norms_rescale_parameters(self, three_atoms):
        assert ScaledJointNorm(1.5, three_atoms).scaled(2.0).lam == 3.0
        split = ScaledSplitNorm(1.0, 2.0, three_atoms).scaled(0.5)
        assert (split.c, split.d) == (0.5, 1.0)

    def test_cvar_wraps(self, unit_atoms):
        base = CvarJump(1.5, unit_atoms)
        scaled = base.scaled(3.0)
        assert isinstance(scaled, Scaled)
        assert not scaled.positive and not scaled.is_symmetric
        v = [-1.0, 2.0, 0.5]
        assert scaled(np.zeros(1), v) == pytest.approx(3.0 * base(np.zeros(1), v))
        assert scaled.scaled(2.0).factor == 6.0
        assert scaled.describe() == {"kind": "cvar_jump", "a": 1.5, "scale": 3.0}


class TestBuildDriver:
    def test_kinds(self, three_atoms):
        assert isinstance(build_driver("split_norm", three_atoms, c=1.0, d=2.0), ScaledSplitNorm)
        assert build_driver("joint_norm", three_atoms).lam == 1.0
        assert build_driver("cvar_jump", three_atoms, a=1.0).describe() == {"kind": "cvar_jump", "a": 1.0}

    def test_unknown(self, three_atoms):
        with pytest.raises(ValueError, match="unknown driver"):
            build_driver("entropic", three_atoms)


class TestAxioms:
    @pytest.mark.parametrize("factory", [
        lambda m: ScaledSplitNorm(0.7, 1.3, m),
        lambda m: ScaledJointNorm(2.0, m),
    ])
    def test_norm_drivers_pass(self, three_atoms, factory):
        report = check_driver_axioms(factory(three_atoms), 500, stream(11))
        assert report.passed
        assert all(check.passed for check in report.checks)
        assert report.check("symmetry").message == "symmetric"

    def test_without_atoms(self):
        report = check_driver_axioms(ScaledJointNorm(1.0, LevyMeasure.empty(1)), 200, stream(12), h_dim=3)
        assert report.passed

    def test_cvar_jump_documents_positivity_failure(self, three_atoms):
        report = check_driver_axioms(CvarJump(1.0, three_atoms), 500, stream(13))
        positivity = report.check("positivity")
        assert not positivity.passed
        assert positivity.expected_failure
        assert positivity.max_violation >= 1.0
        assert report.check("symmetry").message == "asymmetric"
        assert report.check("symmetry").passed
        for name in ("positive_homogeneity", "subadditivity", "linear_growth"):
            assert report.check(name).passed, name
        assert report.passed

    def test_report_names(self, three_atoms):
        report = check_driver_axioms(ScaledJointNorm(1.0, three_atoms), 10, stream(0))
        assert [c.name for c in report.checks] == [
            "positive_homogeneity", "subadditivity", "linear_growth", "positivity", "symmetry",
        ]
