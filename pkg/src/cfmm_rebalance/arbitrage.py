"""Arbitrage detection on the token exchange-rate graph.

A configuration is arbitrage-free exactly when every CFMM's spot price can be
written as ``V[a] / V[b]`` for one positive valuation ``V``.  :func:`detect`
returns either such a valuation or a cycle whose marginal rates multiply to
more than one.  Restricting attention to simple cycles is enough for smooth
fee-free CFMMs: any inconsistent spot price opens a profitable infinitesimal
round trip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

from .errors import NotAnArbitrage, NotProfitable, PoolExhausted
from .model import (
    Basket,
    CfmmState,
    Configuration,
    TokenId,
    apply_trade,
    liquidity,
    spot_price,
)

DEFAULT_TOL = 1e-7
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class CycleLeg(NamedTuple):
    cfmm: int
    token_in: TokenId
    token_out: TokenId


@dataclass(frozen=True)
class Free:
    """Certificate of arbitrage freedom: one numéraire value per token."""

    valuation: dict[TokenId, float]

    is_free = True


@dataclass(frozen=True)
class Prone:
    """Certificate of arbitrage: a cycle of trades and its log marginal gain."""

    cycle: tuple[CycleLeg, ...]
    log_gain: float

    is_free = False

    @property
    def tokens(self) -> tuple[TokenId, ...]:
        return tuple(leg.token_in for leg in self.cycle)


class _Arc(NamedTuple):
    src: int
    dst: int
    weight: float
    leg: CycleLeg


def _arcs(config: Configuration, index: dict[TokenId, int], gammas) -> list[_Arc]:
    arcs = []
    for i, c in enumerate(config.cfmms):
        a, b = c.tokens
        log_p = math.log(spot_price(c))
        log_g = math.log(gammas[i])
        arcs.append(_Arc(index[a], index[b], -(log_p + log_g), CycleLeg(i, a, b)))
        arcs.append(_Arc(index[b], index[a], log_p - log_g, CycleLeg(i, b, a)))
    return arcs


def _negative_cycle(n_vertices: int, arcs: list[_Arc], shift: float):
    """Bellman-Ford from a virtual source; returns (distances, cycle arcs or None)."""
    dist = [0.0] * n_vertices
    pred: list[_Arc | None] = [None] * n_vertices
    last = None
    for _ in range(n_vertices + 1):
        last = None
        for arc in arcs:
            cand = dist[arc.src] + arc.weight + shift
            if cand < dist[arc.dst]:
                dist[arc.dst] = cand
                pred[arc.dst] = arc
                last = arc.dst
        if last is None:
            return dist, None
    v = last
    for _ in range(n_vertices):
        v = pred[v].src
    cycle, u = [], v
    while True:
        arc = pred[u]
        cycle.append(arc)
        u = arc.src
        if u == v:
            break
    cycle.reverse()
    if sum(a.weight + shift for a in cycle) >= 0:
        raise RuntimeError("predecessor walk did not close a negative cycle")
    return dist, cycle


def _components(config: Configuration) -> list[list[TokenId]]:
    parent = {t: t for t in config.tokens}

    def find(t):
        while parent[t] != t:
            parent[t] = parent[parent[t]]
            t = parent[t]
        return t

    for c in config.cfmms:
        ra, rb = find(c.tokens[0]), find(c.tokens[1])
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[TokenId, list[TokenId]] = {}
    for t in sorted(config.tokens):
        groups.setdefault(find(t), []).append(t)
    return list(groups.values())


def _tree_potentials(config: Configuration, component: list[TokenId]) -> dict[TokenId, float]:
    root = component[0]
    pot = {root: 0.0}
    frontier = [root]
    members = set(component)
    while frontier:
        nxt = []
        for t in frontier:
            for c in config.cfmms:
                if t not in c.tokens or not members.issuperset(c.tokens):
                    continue
                a, b = c.tokens
                other = b if t == a else a
                if other in pot:
                    continue
                log_p = math.log(spot_price(c))
                pot[other] = pot[a] - log_p if t == a else pot[b] + log_p
                nxt.append(other)
        frontier = nxt
    return pot


def detect(
    config: Configuration,
    tol: float = DEFAULT_TOL,
    fee_aware: bool = False,
    gammas: Sequence[float] | None = None,
) -> Free | Prone:
    """Classify ``config`` as arbitrage-free or arbitrage-prone.

    Parameters
    ----------
    config : Configuration
    tol : float
        A cycle is reported only when its log rates sum to more than ``tol`` per leg.
    fee_aware : bool
        Discount each marginal rate by the CFMM's fee factor ``gamma``.
    gammas : sequence of float, optional
        Explicit per-CFMM fee factors; overrides ``fee_aware``.

    Returns
    -------
    Free or Prone
        Disconnected parts of the token graph get independent numéraires, each
        normalised so its lexicographically first token is worth 1.
    """
    if gammas is None:
        gammas = [c.gamma if fee_aware else 1.0 for c in config.cfmms]
    discounted = any(g != 1.0 for g in gammas)
    tokens = sorted(config.tokens)
    index = {t: n for n, t in enumerate(tokens)}
    arcs = _arcs(config, index, gammas)
    dist, cycle = _negative_cycle(len(tokens), arcs, tol)
    if cycle is not None:
        legs = [a.leg for a in cycle]
        start = min(range(len(legs)), key=lambda n: (legs[n].token_in, legs[n].cfmm))
        legs = legs[start:] + legs[:start]
        return Prone(tuple(legs), -sum(a.weight for a in cycle))

    valuation: dict[TokenId, float] = {}
    for comp in _components(config):
        if discounted:
            pot = {t: dist[index[t]] for t in comp}
        else:
            pot = _tree_potentials(config, comp)
            slack = tol * len(comp)
            for c in config.cfmms:
                if c.tokens[0] in pot:
                    resid = math.log(spot_price(c)) - (pot[c.tokens[0]] - pot[c.tokens[1]])
                    if abs(resid) > slack:
                        raise RuntimeError(f"valuation residual {resid} exceeds {slack}")
        base = pot[comp[0]]
        for t in comp:
            valuation[t] = math.exp(pot[t] - base)
    return Free({t: valuation[t] for t in config.tokens})


class CycleArbitrage(NamedTuple):
    input_amount: float
    profit: float
    trades: tuple[tuple[int, float, int], ...]


def _rotate(cycle: Sequence[CycleLeg], start_token: TokenId | None) -> list[CycleLeg]:
    legs = [CycleLeg(*leg) for leg in cycle]
    if not legs:
        raise ValueError("empty cycle")
    for a, b in zip(legs, legs[1:] + legs[:1]):
        if a.token_out != b.token_in:
            raise ValueError(f"legs {a} and {b} do not chain")
    if start_token is None:
        return legs
    for n, leg in enumerate(legs):
        if leg.token_in == start_token:
            return legs[n:] + legs[:n]
    raise ValueError(f"start token {start_token!r} is not on the cycle")


def _run(config: Configuration, legs: list[CycleLeg], amount: float):
    """Execute the cycle; returns (amount out, trades, product of post-trade marginal rates)."""
    states: dict[int, CfmmState] = {}
    trades = []
    rate = 1.0
    held = amount
    for leg in legs:
        state = states.get(leg.cfmm, config.cfmms[leg.cfmm])
        side = state.pool_of(leg.token_in)
        result = apply_trade(state, held, side)
        trades.append((leg.cfmm, held, side))
        post = result.state
        price = spot_price(post)  # token 0 in token 1
        rate *= post.gamma * (price if side == 0 else 1.0 / price)
        states[leg.cfmm] = post
        held = result.amount_out
    return held, tuple(trades), rate


def cycle_profit(config: Configuration, cycle: Sequence[CycleLeg], start_token: TokenId | None, amount: float) -> float:
    """Profit in ``start_token`` from pushing ``amount`` once around ``cycle``."""
    legs = _rotate(cycle, start_token)
    try:
        out, _, _ = _run(config, legs, amount)
    except PoolExhausted:
        return -math.inf
    return out - amount


def optimal_cycle_arbitrage(
    config: Configuration,
    cycle: Sequence[CycleLeg],
    start_token: TokenId | None = None,
    rtol: float = 1e-9,
) -> CycleArbitrage:
    """Best single-pass input along ``cycle``, found by golden-section search.

    The profit of a chain of trades is concave in the input, so the search is
    bracketed by doubling until the marginal round-trip rate drops below one,
    narrowed by golden sections, then polished by bisection on that rate.
    The result is accurate to ``rtol`` in both the argmax and the profit.

    Raises
    ------
    NotProfitable
        If no positive input earns a strictly positive profit.
    """
    legs = _rotate(cycle, start_token)
    if all(config.cfmms[leg.cfmm].function.is_linear for leg in legs):
        raise ValueError("a cycle made only of linear CFMMs has unbounded profit")

    def profit(a):
        try:
            out, _, _ = _run(config, legs, a)
        except PoolExhausted:
            return -math.inf
        return out - a

    def slope(a):
        try:
            return _run(config, legs, a)[2] - 1.0
        except PoolExhausted:
            return -math.inf

    first = config.cfmms[legs[0].cfmm]
    hi = abs(first.pools[first.pool_of(legs[0].token_in)]) or 1.0
    for _ in range(200):
        if slope(hi) < 0:
            break
        hi *= 2.0
    top = hi
    lo = 0.0
    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1, f2 = profit(x1), profit(x2)
    # below this width profit differences drown in rounding, so stop early
    while hi - lo > 1e-4 * top:
        if f1 < f2:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + GOLDEN * (hi - lo)
            f2 = profit(x2)
        else:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - GOLDEN * (hi - lo)
            f1 = profit(x1)
    if lo > 0 and slope(lo) <= 0:
        lo = 0.0
    if hi < top and slope(hi) >= 0:
        hi = top
    # the marginal rate decreases along the cycle, so bisect on its sign
    while hi - lo > rtol * 1e-3 * max(hi, 1e-300):
        mid = 0.5 * (lo + hi)
        if slope(mid) > 0:
            lo = mid
        else:
            hi = mid
    best = 0.5 * (lo + hi)
    gain = profit(best) if best > 0 else 0.0
    if not gain > 0:
        raise NotProfitable(f"best profit along cycle is {gain}")
    _, trades, _ = _run(config, legs, best)
    return CycleArbitrage(best, gain, trades)


@dataclass(frozen=True)
class ArbitrageRebalancing:
    """Pool update obtained by replaying an arbitrage as direct transfers."""

    config: Configuration
    profit: Basket
    borrow: Basket
    deposits: dict[TokenId, tuple[int, int]] = field(default_factory=dict)


DepositPolicy = Callable[[Configuration, TokenId, list], tuple]


def smallest_liquidity_pool(config: Configuration, token: TokenId, candidates: list) -> tuple[int, int]:
    """Default deposit target: the least liquid holder of ``token``, lowest index on ties."""
    return min(candidates, key=lambda p: (liquidity(config.cfmms[p[0]]), p[0], p[1]))


def arbitrage_to_rebalancing(
    config: Configuration,
    trade_sequence: Sequence[tuple[int, float, int]],
    deposit_policy: DepositPolicy | None = None,
    atol: float = 1e-12,
) -> ArbitrageRebalancing:
    """Turn a profitable trade sequence into a liquidity-improving rebalancing.

    Each trade ``(cfmm, amount_in, side)`` is mimicked by moving tokens between
    pools; the whole input lands in the pool, so a fee-charging CFMM gains
    liquidity too.  Every positive profit component is then deposited into a
    pool picked by ``deposit_policy``.

    Raises
    ------
    NotAnArbitrage
        If the replay ends with a negative or all-zero profit basket.
    """
    policy = deposit_policy or smallest_liquidity_pool
    balance = {t: 0.0 for t in config.tokens}
    low = dict(balance)
    pools = config.pools()
    current = config
    for cfmm, amount_in, side in trade_sequence:
        state = current.cfmms[cfmm]
        result = apply_trade(state, amount_in, side)
        t_in, t_out = state.tokens[side], state.tokens[1 - side]
        balance[t_in] -= amount_in
        low[t_in] = min(low[t_in], balance[t_in])
        balance[t_out] += result.amount_out
        pools[cfmm, side] += amount_in
        pools[cfmm, 1 - side] -= result.amount_out
        current = current.with_cfmm(cfmm, result.state)

    profit = {t: v for t, v in balance.items() if v != 0.0}
    scale = max([1.0] + [abs(v) for v in low.values()])
    if any(v < -atol * scale for v in profit.values()) or not any(v > atol * scale for v in profit.values()):
        raise NotAnArbitrage(f"trade sequence ends with profit basket {profit}")

    mimic = config.with_pools(pools)
    deposits = {}
    for t in sorted(t for t, v in profit.items() if v > 0):
        target = policy(mimic, t, config.pools_holding(t))
        pools[target] += profit[t]
        deposits[t] = tuple(target)
    result = config.with_pools(pools)
    borrow = {t: -v for t, v in low.items() if v < 0}
    return ArbitrageRebalancing(result, profit, borrow, deposits)
