"""Domain types for CFMM networks and the exact semantics of trades and rebalancings.

Pools are indexed 0 and 1 throughout; an edge ``(i, j, k, l)`` links pool ``j`` of
CFMM ``i`` with pool ``l`` of CFMM ``k`` (``i < k``) when both hold the same token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import (
    InfeasibleRebalancing,
    InvalidConfiguration,
    PoolExhausted,
    UndefinedGradient,
)

TokenId = str
Basket = dict  # TokenId -> signed amount

CONSERVATION_ATOL = 1e-9


class Mode(str, Enum):
    ACTIVE = "active"
    PASSIVE = "passive"
    ORACLE = "oracle"


@dataclass(frozen=True)
class TradingFunction:
    """Invariant ``F(x1, x2)`` of a two-pool CFMM.

    ``kind`` is one of ``"constant_product"`` (``x1 * x2``), ``"weighted"``
    (``x1**w1 * x2**w2`` with ``w1 + w2 = 1``) or ``"linear"`` (``a*x1 + b*x2``).
    Use the classmethod constructors rather than building instances by hand.
    """

    kind: str = "constant_product"
    params: tuple[float, float] = (1.0, 1.0)

    KINDS = ("constant_product", "weighted", "linear")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise InvalidConfiguration(f"unknown trading function kind {self.kind!r}")
        p1, p2 = (float(p) for p in self.params)
        object.__setattr__(self, "params", (p1, p2))
        if not (p1 > 0 and p2 > 0 and math.isfinite(p1) and math.isfinite(p2)):
            raise InvalidConfiguration(f"{self.kind} parameters must be positive, got {self.params}")
        if self.kind == "constant_product" and self.params != (1.0, 1.0):
            raise InvalidConfiguration("constant_product takes no parameters")
        if self.kind == "weighted" and abs(p1 + p2 - 1.0) > 1e-12:
            raise InvalidConfiguration(f"weights must sum to 1, got {self.params}")

    @classmethod
    def constant_product(cls) -> TradingFunction:
        return cls("constant_product", (1.0, 1.0))

    @classmethod
    def weighted(cls, w1: float, w2: float | None = None) -> TradingFunction:
        return cls("weighted", (w1, 1.0 - w1 if w2 is None else w2))

    @classmethod
    def linear(cls, a: float = 1.0, b: float = 1.0) -> TradingFunction:
        return cls("linear", (a, b))

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear"

    @property
    def exponents(self) -> tuple[float, float]:
        """Exponents ``(e1, e2)`` with ``log F = e1 log x1 + e2 log x2`` (geometric kinds)."""
        if self.is_linear:
            raise ValueError("linear trading functions have no exponents")
        return self.params

    def value(self, x1: float, x2: float) -> float:
        if self.is_linear:
            a, b = self.params
            return a * x1 + b * x2
        e1, e2 = self.params
        if x1 <= 0 or x2 <= 0:
            return 0.0
        return x1**e1 * x2**e2

    def log_value(self, x1: float, x2: float) -> float:
        if self.is_linear:
            v = self.value(x1, x2)
            return math.log(v) if v > 0 else -math.inf
        if x1 <= 0 or x2 <= 0:
            return -math.inf
        e1, e2 = self.params
        return e1 * math.log(x1) + e2 * math.log(x2)

    def gradient(self, x1: float, x2: float) -> tuple[float, float]:
        if self.is_linear:
            return self.params
        e1, e2 = self.params
        if x1 <= 0 or x2 <= 0:
            raise UndefinedGradient(f"gradient undefined at pools ({x1}, {x2})")
        f = self.value(x1, x2)
        return e1 * f / x1, e2 * f / x2


@dataclass(frozen=True)
class CfmmState:
    pools: tuple[float, float]
    tokens: tuple[TokenId, TokenId]
    function: TradingFunction = field(default_factory=TradingFunction.constant_product)
    gamma: float = 1.0
    mode: Mode = Mode.ACTIVE
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "pools", (float(self.pools[0]), float(self.pools[1])))
        object.__setattr__(self, "tokens", (self.tokens[0], self.tokens[1]))
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "gamma", float(self.gamma))
        t1, t2 = self.tokens
        if not (isinstance(t1, str) and isinstance(t2, str) and t1 and t2):
            raise InvalidConfiguration(f"token ids must be non-empty strings, got {self.tokens}")
        if t1 == t2:
            raise InvalidConfiguration(f"pool tokens must be distinct, got {self.tokens}")
        if not all(math.isfinite(x) for x in self.pools):
            raise InvalidConfiguration(f"pools must be finite, got {self.pools}")
        if not 0.0 < self.gamma <= 1.0:
            raise InvalidConfiguration(f"fee factor gamma must lie in (0, 1], got {self.gamma}")
        if self.mode is Mode.ORACLE:
            if not self.function.is_linear:
                raise InvalidConfiguration("oracle CFMMs require a linear trading function")
        elif min(self.pools) <= 0:
            raise InvalidConfiguration(f"pools must be strictly positive, got {self.pools}")

    @property
    def is_oracle(self) -> bool:
        return self.mode is Mode.ORACLE

    @property
    def is_active(self) -> bool:
        return self.mode is Mode.ACTIVE

    def with_pools(self, x1: float, x2: float) -> CfmmState:
        return replace(self, pools=(x1, x2))

    def pool_of(self, token: TokenId) -> int:
        return self.tokens.index(token)


@dataclass(frozen=True)
class Configuration:
    cfmms: tuple[CfmmState, ...]
    tokens: tuple[TokenId, ...] = ()

    def __post_init__(self):
        cfmms = tuple(self.cfmms)
        object.__setattr__(self, "cfmms", cfmms)
        tokens = tuple(self.tokens) or tuple(sorted({t for c in cfmms for t in c.tokens}))
        object.__setattr__(self, "tokens", tokens)
        if len(set(tokens)) != len(tokens):
            raise InvalidConfiguration(f"duplicate token ids in universe {tokens}")
        if not all(isinstance(t, str) and t for t in tokens):
            raise InvalidConfiguration("token ids must be non-empty strings")
        known = set(tokens)
        for i, c in enumerate(cfmms):
            missing = set(c.tokens) - known
            if missing:
                raise InvalidConfiguration(f"CFMM {i} uses tokens {sorted(missing)} outside the universe")
            if not c.is_oracle and liquidity(c) <= 0:
                raise InvalidConfiguration(f"CFMM {i} has non-positive liquidity")

    def __len__(self) -> int:
        return len(self.cfmms)

    def __getitem__(self, i: int) -> CfmmState:
        return self.cfmms[i]

    def pools(self) -> np.ndarray:
        return np.array([c.pools for c in self.cfmms], dtype=float).reshape(-1, 2)

    def liquidities(self) -> np.ndarray:
        return np.array([liquidity(c) for c in self.cfmms])

    def with_pools(self, pools) -> Configuration:
        pools = np.asarray(pools, dtype=float)
        if pools.shape != (len(self.cfmms), 2):
            raise ValueError(f"expected pools of shape {(len(self.cfmms), 2)}, got {pools.shape}")
        cfmms = tuple(c.with_pools(float(p[0]), float(p[1])) for c, p in zip(self.cfmms, pools))
        return Configuration(cfmms, self.tokens)

    def with_cfmm(self, i: int, state: CfmmState) -> Configuration:
        cfmms = list(self.cfmms)
        cfmms[i] = state
        return Configuration(tuple(cfmms), self.tokens)

    def token_totals(self) -> dict[TokenId, float]:
        totals = {t: 0.0 for t in self.tokens}
        for c in self.cfmms:
            for t, x in zip(c.tokens, c.pools):
                totals[t] += x
        return totals

    def pools_holding(self, token: TokenId) -> list[tuple[int, int]]:
        return [(i, j) for i, c in enumerate(self.cfmms) for j in (0, 1) if c.tokens[j] == token]


class Edge(NamedTuple):
    """Transfer link between pool ``j`` of CFMM ``i`` and pool ``l`` of CFMM ``k``."""

    i: int
    j: int
    k: int
    l: int  # noqa: E741


EdgeSet = tuple  # tuple[Edge, ...], sorted and duplicate free


@dataclass(frozen=True)
class Rebalancing:
    """Signed transfer amounts; a positive value moves tokens from ``(i, j)`` to ``(k, l)``."""

    deltas: Mapping[Edge, float]

    def __post_init__(self):
        object.__setattr__(self, "deltas", {Edge(*e): float(d) for e, d in self.deltas.items()})

    def negated(self) -> Rebalancing:
        return Rebalancing({e: -d for e, d in self.deltas.items()})

    def is_empty(self) -> bool:
        return not any(d != 0.0 for d in self.deltas.values())


class TradeResult(NamedTuple):
    amount_out: float
    state: CfmmState
    fee: float  # retained outside the pools, in units of the input token


def liquidity(cfmm: CfmmState) -> float:
    """Return ``F(x1, x2)`` for the CFMM's current pools."""
    return cfmm.function.value(*cfmm.pools)


def spot_price(cfmm: CfmmState) -> float:
    """Price of one unit of the first pool's token, in units of the second.

    Raises
    ------
    UndefinedGradient
        If either partial derivative of the trading function is not positive.
    """
    g1, g2 = cfmm.function.gradient(*cfmm.pools)
    if not (g1 > 0 and g2 > 0):
        raise UndefinedGradient(f"non-positive gradient ({g1}, {g2}) at {cfmm.pools}")
    if cfmm.function.is_linear:
        return g1 / g2
    e1, e2 = cfmm.function.exponents
    x1, x2 = cfmm.pools
    return (e1 * x2) / (e2 * x1)


def trade_output(function: TradingFunction, side: int, x_in: float, x_out: float, pool_gain: float) -> float:
    """Amount leaving the output pool when the input pool grows by ``pool_gain``.

    Closed forms keep the result exact along the level set; the geometric branch
    is written with ``log1p``/``expm1`` so small trades keep full precision.
    """
    if pool_gain == 0:
        return 0.0
    if function.is_linear:
        coeff = function.params
        return coeff[side] * pool_gain / coeff[1 - side]
    if function.kind == "constant_product":
        return x_out * pool_gain / (x_in + pool_gain)
    e = function.exponents
    ratio = e[side] / e[1 - side]
    return -x_out * math.expm1(-ratio * math.log1p(pool_gain / x_in))


def apply_trade(cfmm: CfmmState, amount_in: float, side: int) -> TradeResult:
    """Sell ``amount_in`` into pool ``side``; the pool keeps ``gamma * amount_in``.

    The output solves ``F(x_in + gamma*amount_in, x_out - out) = F(x_in, x_out)``; the
    ``(1 - gamma)`` remainder is returned as ``fee`` and does not enter the pools.
    """
    if side not in (0, 1):
        raise ValueError(f"side must be 0 or 1, got {side}")
    if not amount_in > 0:
        raise ValueError(f"amount_in must be positive, got {amount_in}")
    x_in, x_out = cfmm.pools[side], cfmm.pools[1 - side]
    gained = cfmm.gamma * amount_in
    out = trade_output(cfmm.function, side, x_in, x_out, gained)
    if not cfmm.is_oracle and not out < x_out:
        raise PoolExhausted(f"trade needs {out} from a pool holding {x_out}")
    pools = [0.0, 0.0]
    pools[side] = x_in + gained
    pools[1 - side] = x_out - out
    return TradeResult(out, cfmm.with_pools(*pools), amount_in - gained)


def build_edges(config: Configuration, restrict_to_active: bool = False) -> EdgeSet:
    """All canonical edges between pools holding the same token."""
    edges = []
    n = len(config.cfmms)
    for i in range(n):
        for k in range(i + 1, n):
            ci, ck = config.cfmms[i], config.cfmms[k]
            if restrict_to_active and not (ci.is_active and ck.is_active):
                continue
            for j in (0, 1):
                for l in (0, 1):  # noqa: E741
                    if ci.tokens[j] == ck.tokens[l]:
                        edges.append(Edge(i, j, k, l))
    return tuple(edges)


def validate_edges(config: Configuration, edges: Iterable[Sequence[int]]) -> EdgeSet:
    """Canonicalise an explicit edge list and check it against ``config``."""
    n = len(config.cfmms)
    out = []
    for e in edges:
        if len(e) != 4:
            raise InvalidConfiguration(f"edge {e} must have four indices")
        i, j, k, l = (int(v) for v in e)  # noqa: E741
        if not (0 <= i < k < n and j in (0, 1) and l in (0, 1)):
            raise InvalidConfiguration(f"edge {e} is not canonical for {n} CFMMs")
        if config.cfmms[i].tokens[j] != config.cfmms[k].tokens[l]:
            raise InvalidConfiguration(f"edge {e} links pools of different tokens")
        out.append(Edge(i, j, k, l))
    if len(set(out)) != len(out):
        raise InvalidConfiguration("duplicate edges")
    return tuple(sorted(out))


def pool_changes(n_cfmms: int, reb: Rebalancing) -> np.ndarray:
    change = np.zeros((n_cfmms, 2))
    for (i, j, k, l), d in reb.deltas.items():  # noqa: E741
        change[i, j] -= d
        change[k, l] += d
    return change


def apply_rebalancing(config: Configuration, reb: Rebalancing) -> Configuration:
    """Apply direct pool-to-pool transfers, returning a new configuration.

    Raises
    ------
    InfeasibleRebalancing
        If every transfer is zero or some non-oracle pool ends non-positive.
    """
    if reb.is_empty():
        raise InfeasibleRebalancing("a rebalancing needs at least one non-zero transfer")
    validate_edges(config, reb.deltas.keys())
    new_pools = config.pools() + pool_changes(len(config.cfmms), reb)
    for i, c in enumerate(config.cfmms):
        if not c.is_oracle and min(new_pools[i]) <= 0:
            raise InfeasibleRebalancing(f"CFMM {i} would end with pools {tuple(new_pools[i])}")
    result = config.with_pools(new_pools)
    before, after = config.token_totals(), result.token_totals()
    for t in config.tokens:
        assert abs(before[t] - after[t]) <= CONSERVATION_ATOL * max(1.0, abs(before[t])), t
    return result
