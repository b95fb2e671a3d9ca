"""Seeded random CFMM networks for property tests and benchmarks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import InfeasibleSpec
from .model import CfmmState, Configuration, Mode, TradingFunction


@dataclass(frozen=True)
class GenSpec:
    """Recipe for one random scenario.

    ``n_cfmms`` counts every market maker, oracles included.  Pools are drawn
    log-uniformly from ``pool_range``; oracles are linear market makers priced
    from one hidden valuation, so several oracles always agree.
    """

    seed: int
    n_cfmms: int
    n_tokens: int
    pool_range: tuple[float, float] = (0.1, 10.0)
    active_fraction: float = 1.0
    oracle_count: int = 0
    fee_range: tuple[float, float] = (1.0, 1.0)
    ensure_connected: bool = True
    weighted_fraction: float = 0.0
    oracle_depth: float = 1e3

    def __post_init__(self):
        lo, hi = self.pool_range
        g_lo, g_hi = self.fee_range
        if self.n_tokens < 2:
            raise InfeasibleSpec("a scenario needs at least two tokens")
        if self.n_cfmms < 1:
            raise InfeasibleSpec("a scenario needs at least one CFMM")
        if not 0 < lo <= hi:
            raise InfeasibleSpec(f"pool range must be positive and ordered, got {self.pool_range}")
        if not 0 < g_lo <= g_hi <= 1:
            raise InfeasibleSpec(f"fee range must lie in (0, 1], got {self.fee_range}")
        if not 0 <= self.active_fraction <= 1 or not 0 <= self.weighted_fraction <= 1:
            raise InfeasibleSpec("fractions must lie in [0, 1]")
        if not 0 <= self.oracle_count < self.n_cfmms:
            raise InfeasibleSpec("need at least one non-oracle CFMM to rebalance")
        if self.ensure_connected and self.n_cfmms < self.n_tokens - 1:
            raise InfeasibleSpec(f"{self.n_cfmms} CFMMs cannot connect {self.n_tokens} tokens")


def _token_pairs(rng: np.random.Generator, spec: GenSpec) -> list[tuple[int, int]]:
    n = spec.n_tokens
    pairs = []
    if spec.ensure_connected:
        order = rng.permutation(n)
        for k in range(1, n):
            pairs.append((int(order[k]), int(order[rng.integers(k)])))
    used = {frozenset(p) for p in pairs}
    all_pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    while len(pairs) < spec.n_cfmms:
        fresh = [p for p in all_pairs if frozenset(p) not in used]
        pool = fresh or all_pairs
        a, b = pool[rng.integers(len(pool))]
        pairs.append((a, b))
        used.add(frozenset((a, b)))
    # random orientation, so token order inside a CFMM carries no information
    return [(a, b) if rng.random() < 0.5 else (b, a) for a, b in pairs]


def generate(spec: GenSpec) -> Configuration:
    """Build the scenario described by ``spec``; identical specs give identical scenarios."""
    rng = np.random.default_rng(spec.seed)
    tokens = tuple(f"T{i}" for i in range(spec.n_tokens))
    lo, hi = spec.pool_range
    hidden = np.exp(rng.uniform(math.log(lo), math.log(hi), spec.n_tokens))
    pairs = _token_pairs(rng, spec)
    slots = rng.permutation(spec.n_cfmms)
    oracles = set(int(s) for s in slots[: spec.oracle_count])
    regular = [i for i in range(spec.n_cfmms) if i not in oracles]
    n_active = max(1, int(round(spec.active_fraction * len(regular))))
    active = set(int(i) for i in rng.choice(regular, size=n_active, replace=False))

    cfmms = []
    for i, (a, b) in enumerate(pairs):
        pair = (tokens[a], tokens[b])
        pools = np.exp(rng.uniform(math.log(lo), math.log(hi), 2))
        weighted = rng.random() < spec.weighted_fraction
        w1 = float(rng.uniform(0.2, 0.8))
        gamma = float(rng.uniform(*spec.fee_range))
        if i in oracles:
            depth = spec.oracle_depth * hi
            cfmms.append(
                CfmmState((depth, depth), pair, TradingFunction.linear(float(hidden[a]), float(hidden[b])), 1.0, Mode.ORACLE, f"oracle{i}")
            )
            continue
        fn = TradingFunction.weighted(w1) if weighted else TradingFunction.constant_product()
        mode = Mode.ACTIVE if i in active else Mode.PASSIVE
        cfmms.append(CfmmState((float(pools[0]), float(pools[1])), pair, fn, gamma, mode, f"cfmm{i}"))
    return Configuration(tuple(cfmms), tokens)


def corpus_spec(seed: int) -> GenSpec:
    """Spec for one member of the standard test corpus.

    Two to five tokens and at most eight CFMMs; even seeds are restricted
    problems with half the CFMMs passive, every tenth seed adds an oracle, and
    every third seed mixes in weighted CFMMs.  No fees.
    """
    n_tokens = 2 + seed % 4
    n_cfmms = n_tokens - 1 + (seed // 4) % (10 - n_tokens)
    oracle = 1 if seed % 10 == 0 else 0
    if oracle and n_cfmms < 2:
        n_cfmms = 2
    return GenSpec(
        seed=seed,
        n_cfmms=n_cfmms,
        n_tokens=n_tokens,
        active_fraction=0.5 if seed % 2 == 0 else 1.0,
        oracle_count=oracle,
        weighted_fraction=0.3 if seed % 3 == 0 else 0.0,
    )


def corpus(seeds=range(1, 501)) -> Iterator[tuple[int, Configuration]]:
    for seed in seeds:
        yield seed, generate(corpus_spec(seed))


def is_connected(config: Configuration) -> bool:
    """Whether the token graph (tokens as vertices, CFMMs as edges) is connected."""
    seen = {config.tokens[0]}
    frontier = [config.tokens[0]]
    while frontier:
        t = frontier.pop()
        for c in config.cfmms:
            if t in c.tokens:
                other = c.tokens[1 - c.tokens.index(t)]
                if other not in seen:
                    seen.add(other)
                    frontier.append(other)
    return len(seen) == len(config.tokens)
