import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfmm_rebalance.arbitrage import Free, detect
from cfmm_rebalance.errors import InvalidConfiguration, NonPositiveLiquidity, SolverDiverged
from cfmm_rebalance.model import CfmmState, Configuration, Mode, liquidity
from cfmm_rebalance.scenarios import GenSpec, corpus_spec, generate
from cfmm_rebalance.solver import RebalanceProblem, RebalanceSolution, SolverOptions, objective_value, solve, verify

from . import oracles
from .conftest import oracle_triangle, triangle


def problem_for(config, **kw):
    if all(c.is_active for c in config.cfmms):
        return RebalanceProblem.full(config, **kw)
    return RebalanceProblem.restricted(config, **kw)


class TestWorkedExamples:
    def test_triangle_full(self, tri):
        sol = solve(RebalanceProblem.full(tri))
        np.testing.assert_allclose(sol.final_pools, 2.0, atol=1e-6)
        np.testing.assert_allclose(sol.liquidities_after, 4.0, atol=1e-6)
        assert sol.objective_value == pytest.approx(3 * math.log(4), abs=1e-8)
        assert sol.kkt_residual <= 1e-8
        assert sol.status == "optimal"

    def test_triangle_grid_search_agrees(self, tri):
        # one amount per token moved forward around the triangle
        def total(a, b, c):
            pools = [(1 + a, 3 - c), (1 + b, 3 - a), (1 + c, 3 - b)]
            ks = [x * y for x, y in pools]
            return sum(map(math.log, ks)) if min(ks) >= 3 and min(min(p) for p in pools) > 0 else -math.inf

        grid = np.linspace(0, 2, 41)
        best = max(itertools.product(grid, repeat=3), key=lambda t: total(*t))
        assert best == pytest.approx((1.0, 1.0, 1.0))
        assert solve(RebalanceProblem.full(triangle())).objective_value >= total(*best) - 1e-9

    def test_unique_optimum_from_another_start(self, tri):
        start = np.array([[1.5, 2.5]] * 3)  # every liquidity 3.75 > 3
        sol = solve(RebalanceProblem.full(tri), initial_pools=start)
        np.testing.assert_allclose(sol.final_pools, 2.0, atol=1e-6)

    def test_mixed_triangle(self, mixed):
        sol = solve(RebalanceProblem.restricted(mixed))
        d, best = oracles.brute_force_max(oracles.mixed_liquidity, 0.0, 2.9)
        assert d == pytest.approx(0.5, abs=1e-6)
        assert best == pytest.approx(6.25, abs=1e-9)
        assert sol.liquidities_after[0] == pytest.approx(best, abs=1e-6)
        np.testing.assert_allclose(sol.final_pools[0], [2.5, 2.5], atol=1e-6)
        np.testing.assert_allclose(sol.liquidities_after[1:], 3.0, rtol=1e-7)

    @pytest.mark.parametrize("negative", [False, True])
    def test_oracle_triangle(self, oracle, negative):
        sol = solve(RebalanceProblem.restricted(oracle), SolverOptions(oracle_negative_pools=negative))
        d, best = oracles.brute_force_max(oracles.oracle_liquidity, 0.0, 2.9)
        assert d == pytest.approx(oracles.SQRT3 - 1, abs=1e-6)
        assert best == pytest.approx(19 - 8 * oracles.SQRT3, abs=1e-9)
        assert sol.liquidities_after[0] == pytest.approx(best, abs=1e-6)
        np.testing.assert_allclose(sol.final_pools[0], 4 - oracles.SQRT3, atol=1e-6)
        np.testing.assert_allclose(sol.final_pools[1], oracles.SQRT3, atol=1e-6)
        assert isinstance(detect(sol.final_config), Free)

    def test_rebalanced_triangle_is_a_fixed_point(self, tri_rebalanced):
        sol = solve(RebalanceProblem.full(tri_rebalanced))
        assert sol.status == "no_improvement"
        assert abs(sol.improvement) <= 1e-9
        assert sol.canonical_deltas.is_empty()
        np.testing.assert_array_equal(sol.final_pools, tri_rebalanced.pools())

    def test_canonical_deltas_reproduce_final_pools(self, tri):
        from cfmm_rebalance.model import apply_rebalancing

        sol = solve(RebalanceProblem.full(tri))
        np.testing.assert_allclose(apply_rebalancing(tri, sol.canonical_deltas).pools(), sol.final_pools, atol=1e-12)


class TestObjective:
    def test_values(self, tri, tri_rebalanced):
        assert objective_value(tri) == pytest.approx(3 * math.log(3))
        assert objective_value(tri_rebalanced) == pytest.approx(3 * math.log(4))
        assert objective_value(tri, [2, 2, 2]) == 2 * objective_value(tri)

    def test_scope(self, tri):
        assert objective_value(tri, scope=[True, False, False]) == pytest.approx(math.log(3))

    def test_undefined_at_nonpositive_liquidity(self):
        from cfmm_rebalance.model import TradingFunction

        cfg = Configuration((CfmmState((-5, 1), ("A", "B"), TradingFunction.linear(), mode="oracle"),))
        with pytest.raises(NonPositiveLiquidity):
            objective_value(cfg)


class TestProblem:
    def test_full_mode_rejects_oracles(self, oracle):
        with pytest.raises(InvalidConfiguration):
            RebalanceProblem.full(oracle)

    def test_restricted_needs_an_active_cfmm(self, tri):
        with pytest.raises(InvalidConfiguration):
            RebalanceProblem.restricted(tri, active=[])

    def test_oracles_cannot_be_active(self, oracle):
        with pytest.raises(InvalidConfiguration):
            RebalanceProblem.restricted(oracle, active=[0, 2])

    def test_weights_checked(self, tri):
        with pytest.raises(InvalidConfiguration):
            RebalanceProblem.full(tri, weights=(1, 1))
        with pytest.raises(InvalidConfiguration):
            RebalanceProblem.full(tri, weights=(1, 0, 1))

    def test_default_active_set_from_modes(self, mixed):
        assert RebalanceProblem.restricted(mixed).active == (0,)


class TestVerify:
    def test_solver_output_passes(self, tri):
        prob = RebalanceProblem.full(tri)
        report = verify(prob, solve(prob))
        assert report.passed, report

    def test_corrupted_pool_fails_conservation(self, tri):
        prob = RebalanceProblem.full(tri)
        sol = solve(prob)
        pools = sol.final_pools.copy()
        pools[0, 0] += 0.1
        bad = RebalanceSolution.from_final_config(prob, tri.with_pools(pools))
        report = verify(prob, bad)
        assert not report.passed
        assert "conservation" in report.failed()

    def test_unrebalanced_config_fails_arbitrage_check(self, tri):
        prob = RebalanceProblem.full(tri)
        report = verify(prob, RebalanceSolution.from_final_config(prob, tri))
        assert report.failed() == ["arbitrage_free"]

    def test_passive_drift_detected(self, mixed):
        prob = RebalanceProblem.restricted(mixed)
        sol = solve(prob)
        pools = sol.final_pools.copy()
        pools[1] *= 1.01
        report = verify(prob, RebalanceSolution.from_final_config(prob, mixed.with_pools(pools)))
        assert "passive_equality" in report.failed()

    def test_oracle_solution_is_free(self, oracle):
        prob = RebalanceProblem.restricted(oracle)
        report = verify(prob, solve(prob))
        assert report.passed and report["arbitrage_free"].passed


class TestCrossCheck:
    """Barrier solver against a general-purpose SLSQP formulation."""

    @pytest.mark.parametrize("seed", [3, 5, 7, 8, 12, 21, 33, 44])
    def test_matches_slsqp(self, seed):
        cfg = generate(GenSpec(seed=seed, n_cfmms=4, n_tokens=3, active_fraction=0.5 if seed % 2 == 0 else 1.0, weighted_fraction=0.3))
        prob = problem_for(cfg)
        sol = solve(prob)
        exps = [c.function.exponents for c in cfg.cfmms]
        ref = oracles.slsqp_rebalance(cfg.pools(), [c.tokens for c in cfg.cfmms], exps, prob.active_mask)
        assert sol.objective_value == pytest.approx(ref, abs=1e-6)

    def test_weights_matter(self, tri):
        prob = RebalanceProblem.full(tri, weights=(3, 1, 1))
        sol = solve(prob)
        ref = oracles.slsqp_rebalance(tri.pools(), [c.tokens for c in tri.cfmms], [(1, 1)] * 3, [True] * 3, [3, 1, 1])
        assert sol.objective_value == pytest.approx(ref, abs=1e-6)
        assert sol.liquidities_after[0] > sol.liquidities_after[1]


class TestFees:
    def fee_triangle(self, gamma):
        pairs = (("EUR", "USD"), ("GBP", "EUR"), ("USD", "GBP"))
        modes = (Mode.ACTIVE, Mode.PASSIVE, Mode.PASSIVE)
        return Configuration(tuple(CfmmState((1, 3), t, gamma=gamma, mode=m) for t, m in zip(pairs, modes)))

    def test_fees_reduce_the_gain(self):
        free = solve(RebalanceProblem.restricted(self.fee_triangle(1.0), use_fees=True))
        feed = solve(RebalanceProblem.restricted(self.fee_triangle(0.9), use_fees=True))
        assert 3 < feed.liquidities_after[0] < free.liquidities_after[0]

    def test_fee_solution_verifies(self):
        cfg = self.fee_triangle(0.95)
        prob = RebalanceProblem.restricted(cfg, use_fees=True)
        sol = solve(prob)
        assert verify(prob, sol).passed
        np.testing.assert_allclose(sol.liquidities_after[1:], 3.0, rtol=1e-7)

    def test_fee_matches_one_dimensional_route(self):
        g = 0.9

        def route(d):
            pounds = 3 * g * d / (1 + g * d)
            euros = 3 * g * pounds / (1 + g * pounds)
            return (3 - d) * (1 + euros)

        _, best = oracles.brute_force_max(route, 0.0, 2.9)
        sol = solve(RebalanceProblem.restricted(self.fee_triangle(g), use_fees=True))
        assert sol.liquidities_after[0] == pytest.approx(best, abs=1e-6)


class TestStructure:
    def test_independent_components(self):
        cfmms = (
            CfmmState((1, 3), ("A", "B")),
            CfmmState((1, 3), ("B", "C")),
            CfmmState((1, 3), ("C", "A")),
            CfmmState((2, 5), ("X", "Y")),
        )
        sol = solve(RebalanceProblem.full(Configuration(cfmms)))
        np.testing.assert_array_equal(sol.final_pools[3], [2, 5])
        np.testing.assert_allclose(sol.liquidities_after[:3], 4.0, atol=1e-6)

    def test_component_without_active_cfmm_untouched(self):
        cfmms = (
            CfmmState((1, 3), ("A", "B"), mode="passive"),
            CfmmState((1, 3), ("B", "C"), mode="passive"),
            CfmmState((1, 3), ("C", "A"), mode="passive"),
            CfmmState((2, 5), ("X", "Y")),
        )
        sol = solve(RebalanceProblem.restricted(Configuration(cfmms)))
        assert sol.status == "no_improvement"

    def test_diverges_with_starved_newton(self, tri):
        with pytest.raises(SolverDiverged):
            solve(RebalanceProblem.full(tri), SolverOptions(max_iter=1, max_stages=1))

    def test_optimum_is_pareto_efficient(self, tri):
        sol = solve(RebalanceProblem.full(tri))
        again = solve(RebalanceProblem.full(sol.final_config))
        assert again.improvement <= 1e-7


@given(st.integers(1, 100_000))
def test_solver_properties_on_random_scenarios(seed):
    spec = corpus_spec(seed)
    cfg = generate(spec)
    prob = problem_for(cfg)
    sol = solve(prob)
    cert = detect(cfg)
    # monotone improvement, and strict exactly when arbitrage exists
    assert sol.improvement >= -1e-12
    assert cert.is_free == (sol.improvement <= 1e-7)
    report = verify(prob, sol)
    assert report.passed, report
    for i, (c0, c1) in enumerate(zip(cfg.cfmms, sol.final_config.cfmms)):
        if not c0.is_oracle:
            assert liquidity(c1) >= liquidity(c0) * (1 - 1e-10)
    if sol.status == "optimal":
        assert sol.kkt_residual <= 1e-8
