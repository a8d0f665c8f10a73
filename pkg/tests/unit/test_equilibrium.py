import math

import numpy as np
import pytest

from dynamic_deviation.config import load_config
from dynamic_deviation.drivers import ScaledJointNorm, ScaledSplitNorm
from dynamic_deviation.jumps import LevyMeasure
from dynamic_deviation.market import InadmissiblePolicyError, MarketModel
from dynamic_deviation.equilibrium import (
    ConvergenceError,
    TwoAssetParams,
    UnsupportedDimensionError,
    a_minus,
    deviation_operator,
    driver_on_allocation,
    fixed_point,
    generator_linear,
    hjb_residual,
    hjb_table,
    maximize_boundary,
    objective_T,
    ode_residuals,
    printed_switch_curve,
    single_asset_closed_form,
    two_asset_closed_form,
)
from tests.conftest import BENCH_GAMMA, BENCH_T, BENCH_T_STAR, CONFIG_DIR

KAPPA_JUMP = math.sqrt(0.04 + 0.09 * 0.02)


@pytest.fixture(scope="module")
def benchmark():
    model = MarketModel(0.02, [0.08], [[0.2]], [[0.0]], LevyMeasure.empty(1))
    driver = ScaledJointNorm(1.0, model.measure)
    return model, driver, fixed_point(model, driver, BENCH_GAMMA, BENCH_T, grid_size=4096)


@pytest.fixture(scope="module")
def two_asset():
    measure = LevyMeasure(np.array([[0.3, -0.2], [-0.2, 0.3]]), np.array([0.5, 0.5]))
    model = MarketModel(0.02, [0.10, 0.06], [[0.2, 0.0], [0.0, 0.1]], np.eye(2), measure)
    driver = ScaledJointNorm(1.0, measure)
    return model, driver, fixed_point(model, driver, 0.07, 120.0, grid_size=64, tol=1e-9)


class TestObjective:
    def test_zero_allocation(self, two_asset_model, joint_norm):
        for a in (0.0, 3.0, 50.0):
            assert objective_T(two_asset_model, joint_norm(two_asset_model), a, [0.0, 0.0]) == 0.0

    def test_single_asset(self, jump_model, joint_norm):
        value = objective_T(jump_model, joint_norm(jump_model), 5.0, [1.0])
        assert value == pytest.approx(5.0 * 0.06 - KAPPA_JUMP)

    def test_two_asset_reduction(self, two_asset_model, joint_norm):
        params = TwoAssetParams.from_model(two_asset_model)
        for c in (0.0, 0.3, 0.8, 1.0):
            quadratic = params.s1_sq * c * c + 2.0 * params.s12 * c * (1 - c) + params.s2_sq * (1 - c) ** 2
            expected = 4.0 * (0.04 + 0.04 * c) - math.sqrt(quadratic)
            value = objective_T(two_asset_model, joint_norm(two_asset_model), 4.0, [c, 1.0 - c])
            assert value == pytest.approx(expected, abs=1e-12)

    def test_outside_B(self, two_asset_model, joint_norm):
        with pytest.raises(InadmissiblePolicyError):
            objective_T(two_asset_model, joint_norm(two_asset_model), 1.0, [0.8, 0.5])


class TestBoundaryMaximisation:
    def test_level_zero(self, two_asset_model, joint_norm):
        c, s = maximize_boundary(two_asset_model, joint_norm(two_asset_model), 0.0)
        assert s == 0.0
        assert not np.any(c)

    def test_single_asset_above_threshold(self, jump_model, joint_norm):
        c, s = maximize_boundary(jump_model, joint_norm(jump_model), 8.0)
        np.testing.assert_array_equal(c, [1.0])
        assert s == pytest.approx(8.0 * 0.06 - KAPPA_JUMP)

    def test_single_asset_below_threshold(self, benchmark_model, joint_norm):
        c, s = maximize_boundary(benchmark_model, joint_norm(benchmark_model), 3.0)
        np.testing.assert_array_equal(c, [0.0])
        assert s == 0.0

    def test_matches_closed_form_in_middle_band(self, two_asset_model, joint_norm):
        driver = joint_norm(two_asset_model)
        params = TwoAssetParams.from_model(two_asset_model)
        low = a_minus(two_asset_model, driver, 0.07)
        assert low < params.a_plus
        for a in np.linspace(low + 1e-3, params.a_plus - 1e-3, 100):
            c, s = maximize_boundary(two_asset_model, driver, float(a))
            np.testing.assert_allclose(c, two_asset_closed_form(params, float(a), low), atol=1e-6)
            assert s > 0.0

    def test_value_nondecreasing(self, two_asset_model, joint_norm):
        driver = joint_norm(two_asset_model)
        values = [maximize_boundary(two_asset_model, driver, a).s for a in np.linspace(0.0, 14.0, 281)]
        assert np.all(np.diff(values) >= -1e-9)

    def test_argmax_invariant_under_driver_scaling(self, two_asset_model, joint_norm):
        base = joint_norm(two_asset_model)
        scaled = ScaledJointNorm(2.5, two_asset_model.measure)
        for a in (1.0, 3.0, 6.0, 13.0):
            c_base, _ = maximize_boundary(two_asset_model, base, a)
            c_scaled, _ = maximize_boundary(two_asset_model, scaled, 2.5 * a)
            np.testing.assert_allclose(c_scaled, c_base, atol=1e-6)

    def test_three_assets_unsupported(self):
        model = MarketModel(0.02, [0.08, 0.07, 0.06], np.eye(3) * 0.2, np.zeros((3, 3)), LevyMeasure.empty(3))
        driver = ScaledJointNorm(1.0, model.measure)
        with pytest.raises(UnsupportedDimensionError):
            maximize_boundary(model, driver, 1.0)
        with pytest.raises(UnsupportedDimensionError):
            fixed_point(model, driver, 0.1, 10.0, grid_size=64)


class TestAMinus:
    def test_single_asset(self, benchmark_model, jump_model, joint_norm):
        assert a_minus(benchmark_model, joint_norm(benchmark_model), 0.1) == pytest.approx(0.2 / 0.06, abs=1e-9)
        assert a_minus(jump_model, joint_norm(jump_model), 0.1) == pytest.approx(KAPPA_JUMP / 0.06, abs=1e-9)

    def test_scales_with_driver(self, two_asset_model, joint_norm):
        base = a_minus(two_asset_model, joint_norm(two_asset_model), 0.01)
        scaled = a_minus(two_asset_model, joint_norm(two_asset_model, 3.0), 0.01)
        assert scaled == pytest.approx(3.0 * base, rel=1e-9)

    def test_dense_scan(self, two_asset_model, joint_norm):
        driver = joint_norm(two_asset_model)
        low = a_minus(two_asset_model, driver, 0.07)
        grid = np.linspace(0.0, 1.0, 20001)
        ratios = [driver_on_allocation(driver, two_asset_model, np.array([x, 1 - x]))
                  / (0.04 + 0.04 * x) for x in grid]
        assert low == pytest.approx(min(ratios), abs=1e-6)

    def test_capped_at_inverse_gamma(self, benchmark_model, joint_norm):
        assert a_minus(benchmark_model, joint_norm(benchmark_model), 1.0) == 1.0

    def test_needs_positive_excess(self, joint_norm):
        model = MarketModel(0.02, [0.02], [[0.2]], [[0.0]], LevyMeasure.empty(1))
        with pytest.raises(ValueError, match="mu > r"):
            a_minus(model, joint_norm(model), 0.1)


class TestFixedPoint:
    def test_matches_single_asset_closed_form(self, benchmark):
        _, _, solution = benchmark
        oracle = single_asset_closed_form(0.08, 0.02, 0.2, 0.0, 0.0, BENCH_GAMMA, BENCH_T, grid_size=4096)
        assert np.max(np.abs(solution.a_star - oracle.a_star)) <= 1e-6
        assert solution.t_star == pytest.approx(BENCH_T_STAR, abs=1e-6)
        assert solution.a_minus == pytest.approx(0.2 / 0.06, abs=1e-9)
        np.testing.assert_allclose(solution.b, oracle.b, rtol=1e-9)
        np.testing.assert_allclose(solution.d, oracle.d, rtol=1e-9, atol=1e-12)

    def test_invariants(self, benchmark):
        model, driver, solution = benchmark
        assert solution.a_star[-1] == 1.0 / BENCH_GAMMA
        assert solution.b[-1] == 1.0 and solution.d[-1] == 0.0
        assert np.all(np.diff(solution.a_star) >= -1e-12)
        assert np.all(solution.b > 0.0) and np.all(solution.d >= 0.0)
        assert np.all(solution.v <= solution.b)
        assert solution.residual < 1e-9
        assert solution.increments_within_bounds(model, driver)
        assert solution.chi_bounds(model, driver) == (0.0, pytest.approx(0.2))

    def test_value_is_linear_in_wealth(self, benchmark):
        _, _, solution = benchmark
        for t in (0.0, 10.0, 35.5):
            assert solution.value(t, 2.0) == 2.0 * solution.value(t, 1.0)
            assert solution.mean_function(t, 3.0) == 3.0 * solution.mean_function(t, 1.0)
            assert solution.value(t, 1.0) <= solution.mean_function(t, 1.0)

    def test_policy_switches_at_t_star(self, benchmark):
        _, _, solution = benchmark
        policy = solution.policy()
        np.testing.assert_allclose(policy.grid, [0.0, solution.t_star, BENCH_T])
        np.testing.assert_array_equal(policy.values[:, 0], [0.0, 1.0])

    def test_jump_benchmark(self, jump_model, joint_norm):
        solution = fixed_point(jump_model, joint_norm(jump_model), BENCH_GAMMA, BENCH_T, grid_size=1024)
        oracle = single_asset_closed_form(0.08, 0.02, 0.2, 0.3, 0.02, BENCH_GAMMA, BENCH_T, grid_size=1024)
        assert np.max(np.abs(solution.a_star - oracle.a_star)) <= 1e-6
        assert solution.t_star == pytest.approx(oracle.t_star, abs=1e-6)

    def test_grid_refinement(self, benchmark, benchmark_model, joint_norm):
        _, _, fine = benchmark
        coarse = fixed_point(benchmark_model, joint_norm(benchmark_model), BENCH_GAMMA, BENCH_T, grid_size=1024)
        assert np.max(np.abs(fine.a_star[::4] - coarse.a_star)) <= 1e-5

    def test_degenerate(self, benchmark_model, joint_norm):
        solution = fixed_point(benchmark_model, joint_norm(benchmark_model), 1.0, 10.0, grid_size=64)
        assert solution.degenerate
        assert solution.iterations == 0
        assert not np.any(solution.C_star)
        np.testing.assert_allclose(solution.b, np.exp(0.02 * (10.0 - solution.grid)))
        assert solution.value(0.0, 2.0) == pytest.approx(2.0 * math.exp(0.2))
        assert solution.summary()["degenerate"] is True

    def test_non_convergence(self, benchmark_model, joint_norm):
        with pytest.raises(ConvergenceError) as info:
            fixed_point(benchmark_model, joint_norm(benchmark_model), BENCH_GAMMA, BENCH_T,
                        grid_size=64, max_iter=1)
        assert info.value.iterations == 1
        assert info.value.residual > 0.0

    @pytest.mark.parametrize("kwargs", [
        dict(grid_size=32), dict(tol=0.0), dict(damping=0.0), dict(damping=1.5),
    ])
    def test_invalid_arguments(self, benchmark_model, joint_norm, kwargs):
        with pytest.raises(ValueError):
            fixed_point(benchmark_model, joint_norm(benchmark_model), BENCH_GAMMA, BENCH_T, **kwargs)

    def test_frame_and_summary(self, benchmark):
        _, _, solution = benchmark
        frame = solution.to_frame()
        assert list(frame.columns) == ["t", "a_star", "C_1", "b", "d", "v"]
        assert len(frame) == 4097
        summary = solution.summary()
        assert summary["t_star"] == pytest.approx(BENCH_T_STAR, abs=1e-6)
        assert summary["s_inverse_gamma"] == pytest.approx(10.0 * 0.06 - 0.2)


class TestTwoAsset:
    def test_params(self, two_asset_model):
        params = TwoAssetParams.from_model(two_asset_model)
        assert (params.s1_sq, params.s2_sq, params.s12) == pytest.approx((0.105, 0.075, -0.06))
        assert params.d_plus == pytest.approx(0.3)
        assert params.e_plus == pytest.approx(-0.135)
        assert params.c_plus(params.a_plus) == pytest.approx(1.0, abs=1e-8)

    def test_domain(self, two_asset_model):
        params = TwoAssetParams.from_model(two_asset_model)
        with pytest.raises(ValueError, match="outside"):
            params.eta(math.sqrt(params.d_plus) / params.spread + 0.1)

    def test_needs_negative_covariance(self):
        model = MarketModel(0.02, [0.10, 0.06], np.diag([0.2, 0.1]), np.eye(2), LevyMeasure.empty(2))
        with pytest.raises(ValueError, match="s_12"):
            TwoAssetParams.from_model(model)

    def test_regions_match_case_table(self, two_asset):
        model, _, solution = two_asset
        params = TwoAssetParams.from_model(model)
        regions = set()
        for a, c in zip(solution.a_star, solution.C_star):
            # left of t* the level equals a_- up to rounding
            level = float(a) if a > solution.a_minus + 1e-9 else solution.a_minus
            expected = two_asset_closed_form(params, level, solution.a_minus)
            np.testing.assert_allclose(c, expected, atol=1e-6)
            if not np.any(expected):
                regions.add("riskless")
            elif expected[0] == 1.0:
                regions.add("first asset")
            else:
                regions.add("interior")
        assert regions == {"riskless", "interior", "first asset"}

    def test_solution_invariants(self, two_asset):
        model, driver, solution = two_asset
        assert np.all(np.diff(solution.a_star) >= -1e-12)
        assert solution.increments_within_bounds(model, driver)
        assert 0.0 < solution.t_star < 120.0


class TestSingleAssetClosedForm:
    def test_boundary_and_ratio(self):
        solution = single_asset_closed_form(0.08, 0.02, 0.2, 0.0, 0.0, 0.1, 40.0, grid_size=400)
        assert solution.value(40.0, 1.5) == pytest.approx(1.5)
        assert solution.mean_function(40.0, 1.5) == pytest.approx(1.5)
        for i in (200, 300, 399):
            t = solution.grid[i]
            assert solution.v[i] / solution.b[i] == pytest.approx(1.0 - (40.0 - t) * 0.1 * 0.2)
        assert solution.t_star == pytest.approx(BENCH_T_STAR)

    def test_printed_curve_shares_endpoints(self):
        t_star = BENCH_T_STAR
        assert printed_switch_curve(0.08, 0.02, 0.1, 40.0, 40.0) == pytest.approx(10.0)
        assert printed_switch_curve(0.08, 0.02, 0.1, 40.0, t_star) == pytest.approx(0.2 / 0.06)

    def test_switch_before_zero(self):
        solution = single_asset_closed_form(0.08, 0.02, 0.2, 0.0, 0.0, 0.1, 5.0, grid_size=64)
        assert solution.t_star == -math.inf
        assert np.all(solution.C_star == 1.0)

    def test_degenerate(self):
        solution = single_asset_closed_form(0.08, 0.02, 0.2, 0.0, 0.0, 1.0, 5.0, grid_size=64)
        assert solution.degenerate
        assert not np.any(solution.C_star)

    def test_invalid(self):
        with pytest.raises(ValueError):
            single_asset_closed_form(0.02, 0.02, 0.2, 0.0, 0.0, 0.1, 40.0)


class TestGenerators:
    def test_linear_generator_cancels_jumps(self, two_asset_model):
        for c in ([0.0, 0.0], [0.3, 0.6], [1.0, 0.0]):
            identity, direct = generator_linear(two_asset_model, c, 1.7, 2.3)
            assert abs(identity - direct) <= 1e-14
            assert identity == pytest.approx(two_asset_model.mu_pi(np.array(c)) * 2.3 * 1.7)

    def test_deviation_operator(self, jump_model, joint_norm):
        driver = joint_norm(jump_model)
        value = deviation_operator(jump_model, driver, [1.0], 1.3, 2.0)
        assert value == pytest.approx(2.0 * 1.3 * KAPPA_JUMP)


class TestResiduals:
    def test_hjb_on_benchmark(self, benchmark):
        model, driver, solution = benchmark
        table = hjb_table(model, driver, BENCH_GAMMA, solution, [0.5, 1.0, 2.0], times=[1.0, 5.0, 20.0, 39.0])
        assert not table["excluded"].any()
        assert (table["res_V"].abs() <= 1e-6 * table["x"]).all()
        assert (table["res_h"].abs() <= 1e-6 * table["x"]).all()

    def test_node_at_switch_is_excluded(self, benchmark):
        model, driver, solution = benchmark
        result = hjb_residual(model, driver, BENCH_GAMMA, solution, solution.t_star, 1.0)
        assert result.excluded

    def test_hjb_on_degenerate(self, benchmark_model, joint_norm):
        driver = joint_norm(benchmark_model)
        solution = fixed_point(benchmark_model, driver, 1.0, 10.0, grid_size=256)
        table = hjb_table(benchmark_model, driver, 1.0, solution, [1.0, 3.0])
        assert not table["excluded"].any()
        assert (table[["res_V", "res_h"]].abs().max(axis=1) <= 1e-6 * table["x"]).all()

    def test_ode_residuals(self, benchmark):
        model, driver, solution = benchmark
        residuals = ode_residuals(solution, model, driver)
        assert residuals.excluded.sum() >= 1
        assert residuals.max_abs() <= 1e-6

    def test_hjb_needs_positive_wealth(self, benchmark):
        model, driver, solution = benchmark
        with pytest.raises(ValueError):
            hjb_residual(model, driver, BENCH_GAMMA, solution, 10.0, 0.0)

    def test_split_norm_driver_runs(self, benchmark_model):
        driver = ScaledSplitNorm(1.0, 1.0, benchmark_model.measure)
        solution = fixed_point(benchmark_model, driver, BENCH_GAMMA, BENCH_T, grid_size=256)
        assert solution.a_minus == pytest.approx(0.2 / 0.06, abs=1e-9)
        assert solution.t_star == pytest.approx(BENCH_T_STAR, abs=1e-6)


def solve_config(name):
    config = load_config(CONFIG_DIR / name, environ={})
    model = config.market_model()
    driver = config.build_driver(model.measure)
    numerics = config.numerics
    solution = fixed_point(model, driver, config.problem.gamma, config.problem.T,
                           grid_size=numerics.grid_size, tol=numerics.tol)
    return config, model, driver, solution


class TestShippedConfigs:
    def test_two_asset_converges_at_shipped_numerics(self):
        config, model, driver, solution = solve_config("two_asset.yaml")
        assert (config.numerics.grid_size, config.numerics.tol) == (256, 1e-10)
        assert solution.residual < 10.0 * config.numerics.tol
        assert 0.0 < solution.t_star < config.problem.T
        inactive = solution.grid < solution.t_star
        assert inactive.any()
        assert np.all(solution.a_star[inactive] == solution.a_minus)
        assert np.all(solution.C_star[inactive] == 0.0)
        assert solution.a_star[-1] == pytest.approx(1.0 / config.problem.gamma, abs=1e-12)
        assert solution.increments_within_bounds(model, driver)

    def test_two_asset_matches_case_table(self):
        _, model, _, solution = solve_config("two_asset.yaml")
        params = TwoAssetParams.from_model(model)
        active = solution.grid > solution.t_star
        for a, c in zip(solution.a_star[active], solution.C_star[active]):
            np.testing.assert_allclose(c, two_asset_closed_form(params, float(a), solution.a_minus), atol=1e-6)

    def test_jump_benchmark_hjb_on_every_node(self):
        config, model, driver, solution = solve_config("jump_benchmark.yaml")
        table = hjb_table(model, driver, config.problem.gamma, solution, [0.5, 1.0, 2.0])
        assert len(table) == 3 * (solution.grid.size - 2)
        kept = table[~table["excluded"]]
        assert len(kept) >= len(table) - 3 * 3
        assert (kept[["res_V", "res_h"]].abs().max(axis=1) <= 1e-6 * kept["x"]).all()
        assert (table["consistency"] <= 1e-12 * table["x"]).all()
