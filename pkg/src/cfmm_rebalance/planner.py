"""Turn a rebalancing into an ordered, self-funding sequence of transfers and trades.

Active CFMMs move tokens to and from an agent account with direct transfers;
each passive CFMM's net change becomes one standard trade.  Steps are ordered
greedily so the agent borrows as little as possible up front, and everything it
borrows is repaid by the last step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np

from .arbitrage import Free, detect
from .errors import InconsistentPassiveDelta, PlanMismatch, PoolExhausted, StepInfeasible
from .model import Basket, Configuration, TokenId, trade_output

PASSIVE_RTOL = 1e-7
MATCH_RTOL = 1e-7
RESIDUE_ATOL = 1e-9


class PoolRef(NamedTuple):
    cfmm: int
    pool: int


@dataclass(frozen=True)
class Transfer:
    """Move ``amount`` of ``token`` between a pool and the agent (``None`` = agent)."""

    source: PoolRef | None
    target: PoolRef | None
    token: TokenId
    amount: float


@dataclass(frozen=True)
class Trade:
    cfmm: int
    token_in: TokenId
    amount_in: float
    token_out: TokenId
    expected_out: float
    gamma: float = 1.0


@dataclass(frozen=True)
class Borrow:
    basket: Basket


@dataclass(frozen=True)
class Repay:
    basket: Basket


Step = Union[Transfer, Trade, Borrow, Repay]


@dataclass(frozen=True)
class ExecutionPlan:
    steps: tuple
    borrow_basket: Basket = field(default_factory=dict)
    expected_final_pools: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.steps)


def _needs(step) -> tuple[TokenId, float] | None:
    if isinstance(step, Trade):
        return step.token_in, step.amount_in
    if isinstance(step, Transfer) and step.source is None:
        return step.token, step.amount
    return None


def plan(config: Configuration, solution, valuation: dict | None = None) -> ExecutionPlan:
    """Build an execution plan for ``solution`` starting from ``config``.

    ``valuation`` prices shortfalls when the greedy order gets stuck; it
    defaults to the valuation certified for the solution's final configuration.

    Raises
    ------
    InconsistentPassiveDelta
        If a passive CFMM's net change is not a single level-set trade.
    """
    problem = solution.problem
    active = problem.active_mask
    gammas = problem.gammas
    before = config.pools()
    delta = solution.final_config.pools() - before
    final = before.copy()

    outflows, trades, inflows = [], [], []
    for i, c in enumerate(config.cfmms):
        d = delta[i].copy()
        d[np.abs(d) <= 1e-15 * np.maximum(1.0, np.abs(before[i]))] = 0.0
        if not d.any():
            continue
        if active[i]:
            for j in (0, 1):
                if d[j] < 0:
                    outflows.append(Transfer(PoolRef(i, j), None, c.tokens[j], float(-d[j])))
                elif d[j] > 0:
                    inflows.append(Transfer(None, PoolRef(i, j), c.tokens[j], float(d[j])))
            final[i] = before[i] + d
            continue
        side = int(np.argmax(d))
        if not (d[side] > 0 and d[1 - side] < 0):
            raise InconsistentPassiveDelta(f"passive CFMM {i} changed by {tuple(d)}; a trade moves its pools in opposite directions")
        amount_in = float(d[side] / gammas[i])
        out = trade_output(c.function, side, before[i, side], before[i, 1 - side], float(d[side]))
        scale = max(abs(d[1 - side]), 1e-6 * abs(before[i, 1 - side]))
        if abs(out + d[1 - side]) > PASSIVE_RTOL * scale:
            raise InconsistentPassiveDelta(
                f"passive CFMM {i}: trade of {amount_in} yields {out}, but the pool changes by {-d[1 - side]}"
            )
        trades.append(Trade(i, c.tokens[side], amount_in, c.tokens[1 - side], float(out), float(gammas[i])))
        final[i, side] = before[i, side] + d[side]
        final[i, 1 - side] = before[i, 1 - side] - out

    pending = outflows + trades + inflows
    if not pending:
        return ExecutionPlan((), {}, before)

    if valuation is None:
        cert = detect(solution.final_config, 1e-6)
        valuation = cert.valuation if isinstance(cert, Free) else {}
    balance: dict[TokenId, float] = {}
    borrow: dict[TokenId, float] = {}
    ordered = []
    while pending:
        pick = None
        for n, step in enumerate(pending):
            need = _needs(step)
            # rounding-level shortfalls are not worth a loan
            if need is None or balance.get(need[0], 0.0) >= need[1] - 1e-12 * max(1.0, need[1]):
                pick = n
                break
        if pick is None:
            # stuck: borrow the cheapest shortfall that unlocks some step
            costs = []
            for n, step in enumerate(pending):
                token, amount = _needs(step)
                short = amount - balance.get(token, 0.0)
                costs.append((short * valuation.get(token, 1.0), n, token, short))
            _, pick, token, short = min(costs)
            borrow[token] = borrow.get(token, 0.0) + short
            balance[token] = balance.get(token, 0.0) + short
        step = pending.pop(pick)
        _credit(balance, step)
        ordered.append(step)

    if borrow:
        ordered = [Borrow(dict(borrow))] + ordered + [Repay(dict(borrow))]
    return ExecutionPlan(tuple(ordered), dict(borrow), final)


def _credit(balance: dict, step) -> None:
    if isinstance(step, Transfer):
        sign = 1.0 if step.target is None else -1.0
        balance[step.token] = balance.get(step.token, 0.0) + sign * step.amount
    elif isinstance(step, Trade):
        balance[step.token_in] = balance.get(step.token_in, 0.0) - step.amount_in
        balance[step.token_out] = balance.get(step.token_out, 0.0) + step.expected_out


@dataclass(frozen=True)
class Replay:
    final_config: Configuration
    residue: dict  # agent balance after the last step
    fees: dict  # fee revenue retained by passive CFMMs, per token


def replay(config: Configuration, plan: ExecutionPlan, atol: float = RESIDUE_ATOL) -> Replay:
    """Execute every step against ``config`` while tracking the agent's balance.

    Raises
    ------
    StepInfeasible
        On a negative agent balance (beyond ``atol``), an exhausted or
        overdrawn pool, or a malformed step.
    """
    pools = config.pools()
    balance: dict[TokenId, float] = {}
    fees: dict[TokenId, float] = {}
    n = len(config.cfmms)

    def pool_of(ref, token, idx):
        if ref is None:
            return None
        i, j = ref
        if not (0 <= i < n and j in (0, 1)):
            raise StepInfeasible(idx, f"pool {tuple(ref)} does not exist")
        if config.cfmms[i].tokens[j] != token:
            raise StepInfeasible(idx, f"pool {tuple(ref)} does not hold {token}")
        return i, j

    def spend(token, amount, idx):
        left = balance.get(token, 0.0) - amount
        if left < -atol:
            raise StepInfeasible(idx, f"agent holds {balance.get(token, 0.0)} {token}, needs {amount}")
        balance[token] = left

    for idx, step in enumerate(plan.steps):
        if isinstance(step, Borrow):
            for t, a in step.basket.items():
                balance[t] = balance.get(t, 0.0) + a
        elif isinstance(step, Repay):
            for t, a in step.basket.items():
                spend(t, a, idx)
        elif isinstance(step, Transfer):
            if not step.amount > 0:
                raise StepInfeasible(idx, f"transfer amount must be positive, got {step.amount}")
            src, dst = pool_of(step.source, step.token, idx), pool_of(step.target, step.token, idx)
            if src is None:
                spend(step.token, step.amount, idx)
            else:
                pools[src] -= step.amount
                if not config.cfmms[src[0]].is_oracle and pools[src] <= 0:
                    raise StepInfeasible(idx, f"pool {src} would be exhausted")
            if dst is None:
                balance[step.token] = balance.get(step.token, 0.0) + step.amount
            else:
                pools[dst] += step.amount
        elif isinstance(step, Trade):
            i = step.cfmm
            if not 0 <= i < n:
                raise StepInfeasible(idx, f"CFMM {i} does not exist")
            c = config.cfmms[i]
            if (step.token_in, step.token_out) not in (c.tokens, c.tokens[::-1]):
                raise StepInfeasible(idx, f"CFMM {i} does not trade {step.token_in} for {step.token_out}")
            if not (step.amount_in > 0 and 0 < step.gamma <= 1):
                raise StepInfeasible(idx, "trade needs a positive amount and gamma in (0, 1]")
            spend(step.token_in, step.amount_in, idx)
            side = c.tokens.index(step.token_in)
            gained = step.gamma * step.amount_in
            out = trade_output(c.function, side, pools[i, side], pools[i, 1 - side], gained)
            if not c.is_oracle and not out < pools[i, 1 - side]:
                raise StepInfeasible(idx, str(PoolExhausted(f"CFMM {i} cannot pay out {out}")))
            pools[i, side] += gained
            pools[i, 1 - side] -= out
            fees[step.token_in] = fees.get(step.token_in, 0.0) + step.amount_in - gained
            balance[step.token_out] = balance.get(step.token_out, 0.0) + out
        else:
            raise StepInfeasible(idx, f"unknown step {step!r}")

    for i, c in enumerate(config.cfmms):
        if not c.is_oracle and min(pools[i]) <= 0:
            raise StepInfeasible(len(plan.steps) - 1, f"CFMM {i} ends with non-positive pools")
    return Replay(config.with_pools(pools), balance, fees)


def simulate(config: Configuration, plan: ExecutionPlan, rtol: float = MATCH_RTOL, atol: float = RESIDUE_ATOL) -> Configuration:
    """Replay ``plan`` and check it reaches its expected pools with zero agent residue.

    Raises
    ------
    StepInfeasible
        If some step cannot execute.
    PlanMismatch
        If the agent keeps or owes tokens at the end, or the final pools differ
        from ``plan.expected_final_pools`` by more than ``rtol``.
    """
    result = replay(config, plan, atol)
    worst = max((abs(v) for v in result.residue.values()), default=0.0)
    if worst > atol:
        raise PlanMismatch(f"agent residue {worst:.3g} exceeds {atol:.1g}: {result.residue}")
    if plan.expected_final_pools is not None:
        got = result.final_config.pools()
        want = np.asarray(plan.expected_final_pools, dtype=float)
        if got.shape != want.shape:
            raise PlanMismatch(f"plan expects {want.shape[0]} CFMMs, configuration has {got.shape[0]}")
        err = np.abs(got - want) / np.maximum(np.abs(want), 1e-300)
        if not float(err.max(initial=0.0)) <= rtol:
            raise PlanMismatch(f"replayed pools differ from the plan by relative {float(err.max()):.3g}")
    return result.final_config


def max_relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float((np.abs(a - b) / np.maximum(np.abs(b), 1e-300)).max(initial=0.0))


def plan_cost(plan: ExecutionPlan, valuation: dict) -> float:
    """Value of the borrow basket under ``valuation``."""
    return math.fsum(a * valuation.get(t, 1.0) for t, a in plan.borrow_basket.items())
