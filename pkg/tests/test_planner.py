import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfmm_rebalance.errors import InconsistentPassiveDelta, PlanMismatch, StepInfeasible
from cfmm_rebalance.model import liquidity
from cfmm_rebalance.planner import Borrow, ExecutionPlan, PoolRef, Repay, Trade, Transfer, plan, replay, simulate
from cfmm_rebalance.scenarios import corpus_spec, generate
from cfmm_rebalance.solver import RebalanceProblem, RebalanceSolution, solve

from .conftest import triangle

SQRT3 = math.sqrt(3)


def solved(config):
    prob = RebalanceProblem.full(config) if all(c.is_active for c in config.cfmms) else RebalanceProblem.restricted(config)
    return solve(prob)


class TestWorkedPlans:
    def test_oracle_plan_shape(self, oracle):
        sol = solved(oracle)
        p = plan(oracle, sol)
        assert p.borrow_basket == {}
        kinds = [type(s) for s in p.steps]
        assert kinds == [Transfer, Trade, Trade, Transfer]
        out, first, second, back = p.steps
        assert out.source == PoolRef(0, 1) and out.token == "USD"
        assert out.amount == pytest.approx(SQRT3 - 1, abs=1e-6)
        assert (first.cfmm, first.token_in, first.token_out) == (2, "USD", "GBP")
        assert first.expected_out == pytest.approx(SQRT3 - 1, abs=1e-6)
        assert (second.cfmm, second.token_out) == (1, "EUR")
        assert second.expected_out == pytest.approx(3 - SQRT3, abs=1e-6)
        assert back.target == PoolRef(0, 0) and back.amount == pytest.approx(3 - SQRT3, abs=1e-6)

    def test_oracle_plan_replays(self, oracle):
        p = plan(oracle, solved(oracle))
        final = simulate(oracle, p)
        np.testing.assert_allclose(final.pools()[0], 4 - SQRT3, atol=1e-6)

    def test_triangle_plan_needs_no_loan(self, tri):
        sol = solved(tri)
        p = plan(tri, sol)
        assert p.borrow_basket == {}
        assert all(isinstance(s, Transfer) for s in p.steps)
        moved = {}
        for s in p.steps:
            if s.source is not None:
                moved[s.token] = moved.get(s.token, 0) + s.amount
        # one unit of each token leaves one pool and lands in another
        assert moved == pytest.approx({"EUR": 1.0, "GBP": 1.0, "USD": 1.0}, abs=1e-6)
        np.testing.assert_allclose(simulate(tri, p).pools(), sol.final_pools, rtol=1e-12)

    def test_mixed_plan(self, mixed):
        sol = solved(mixed)
        p = plan(mixed, sol)
        trades = [s for s in p.steps if isinstance(s, Trade)]
        assert [t.cfmm for t in trades] == [2, 1]
        assert trades[0].amount_in == pytest.approx(0.5, abs=1e-6)
        assert trades[0].expected_out == pytest.approx(1.0, abs=1e-6)
        assert trades[1].expected_out == pytest.approx(1.5, abs=1e-6)

    def test_zero_delta_plan_is_empty(self, tri_rebalanced):
        p = plan(tri_rebalanced, solved(tri_rebalanced))
        assert p.steps == () and p.borrow_basket == {}
        assert simulate(tri_rebalanced, p) == tri_rebalanced


class TestSimulate:
    def test_empty_plan_is_identity(self, tri):
        assert simulate(tri, ExecutionPlan(())) == tri

    def test_wrong_initial_config(self, oracle, tri):
        p = plan(oracle, solved(oracle))
        with pytest.raises((StepInfeasible, PlanMismatch)):
            simulate(tri, p)

    def test_overspending_reports_step(self, tri):
        p = ExecutionPlan((Transfer(None, PoolRef(0, 0), "EUR", 1.0),))
        with pytest.raises(StepInfeasible) as err:
            simulate(tri, p)
        assert err.value.step_index == 0

    def test_exhausting_a_pool(self, tri):
        p = ExecutionPlan((Transfer(PoolRef(0, 0), None, "EUR", 1.0),))
        with pytest.raises(StepInfeasible):
            simulate(tri, p)

    def test_wrong_token(self, tri):
        with pytest.raises(StepInfeasible):
            replay(tri, ExecutionPlan((Transfer(PoolRef(0, 0), None, "USD", 0.1),)))

    def test_residue_detected(self, tri):
        p = ExecutionPlan((Transfer(PoolRef(0, 0), None, "EUR", 0.1),))
        with pytest.raises(PlanMismatch):
            simulate(tri, p)

    def test_borrow_and_repay(self, tri):
        p = ExecutionPlan(
            (
                Borrow({"USD": 1.0}),
                Trade(2, "USD", 1.0, "GBP", 1.5),
                Trade(1, "GBP", 1.5, "EUR", 1.8),
                Transfer(None, PoolRef(0, 0), "EUR", 1.8),
                Transfer(PoolRef(0, 1), None, "USD", 1.0),
                Repay({"USD": 1.0}),
            )
        )
        final = simulate(tri, p)
        assert liquidity(final.cfmms[0]) == pytest.approx(2.8 * 2.0)

    def test_fee_trade_keeps_liquidity(self):
        from cfmm_rebalance.model import CfmmState, Configuration

        cfg = Configuration((CfmmState((1, 3), ("USD", "GBP"), gamma=0.9),))
        res = replay(cfg, ExecutionPlan((Borrow({"USD": 1.0}), Trade(0, "USD", 1.0, "GBP", 0.0, 0.9))))
        assert liquidity(res.final_config.cfmms[0]) == pytest.approx(3.0, rel=1e-12)
        assert res.fees == {"USD": pytest.approx(0.1)}


def test_inconsistent_passive_change(mixed):
    prob = RebalanceProblem.restricted(mixed)
    sol = solve(prob)
    pools = sol.final_pools.copy()
    pools[1, 1] -= 0.05
    pools[0, 0] += 0.05
    with pytest.raises(InconsistentPassiveDelta):
        plan(mixed, RebalanceSolution.from_final_config(prob, mixed.with_pools(pools)))


def test_fee_plan_round_trip():
    from cfmm_rebalance.model import CfmmState, Configuration, Mode

    pairs = (("EUR", "USD"), ("GBP", "EUR"), ("USD", "GBP"))
    modes = (Mode.ACTIVE, Mode.PASSIVE, Mode.PASSIVE)
    cfg = Configuration(tuple(CfmmState((1, 3), t, gamma=0.97, mode=m) for t, m in zip(pairs, modes)))
    sol = solve(RebalanceProblem.restricted(cfg, use_fees=True))
    p = plan(cfg, sol)
    assert all(s.gamma == 0.97 for s in p.steps if isinstance(s, Trade))
    np.testing.assert_allclose(simulate(cfg, p).pools(), sol.final_pools, rtol=1e-7)


@given(st.integers(1, 100_000))
def test_plans_are_faithful_and_self_funding(seed):
    cfg = generate(corpus_spec(seed))
    sol = solved(cfg)
    p = plan(cfg, sol)
    res = replay(cfg, p)
    assert max((abs(v) for v in res.residue.values()), default=0.0) <= 1e-9
    scale = np.maximum(np.abs(sol.final_pools), 1e-300)
    assert (np.abs(res.final_config.pools() - sol.final_pools) / scale).max() <= 1e-7
    if p.borrow_basket:
        assert isinstance(p.steps[0], Borrow) and isinstance(p.steps[-1], Repay)
        assert p.steps[0].basket == p.steps[-1].basket == p.borrow_basket
    for s in p.steps:
        if isinstance(s, Trade):
            c0, c1 = cfg.cfmms[s.cfmm], res.final_config.cfmms[s.cfmm]
            if not c0.is_oracle:
                assert liquidity(c1) == pytest.approx(liquidity(c0), rel=1e-10)
