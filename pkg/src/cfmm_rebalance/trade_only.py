"""Arbitrage protection with trades alone.

Every CFMM keeps its liquidity, the final configuration must admit a consistent
valuation, and the agent injects or withdraws per-token slack ``sigma``
(positive = withdrawn).  The program minimises ``sum sigma_t**2``; it is not
convex, so it is solved from several deterministic starts.

Given log-valuations ``u`` the constraints pin every CFMM's pools in closed
form (spot price ``exp(u_a - u_b)`` on the level set ``F = k``), which leaves an
unconstrained problem in ``u`` alone.  A quadratic-penalty formulation over the
pools themselves is kept as an independent route for cross-checking.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .arbitrage import _components, _tree_potentials
from .errors import NoFeasiblePoint
from .model import Configuration, liquidity

log = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-8


@dataclass(frozen=True)
class TradeOnlyOptions:
    starts: int = 16
    method: str = "elimination"  # or "penalty"
    penalty_start: float = 10.0
    penalty_stages: int = 6  # mu = 10, 100, ..., 1e6
    start_spread: float = 2.0  # half-width of the start box in log-valuation units
    gtol: float = 1e-12


@dataclass(frozen=True)
class TradeOnlyResult:
    final_config: Configuration
    sigma: dict
    valuation: dict
    objective: float
    start_index: int
    method: str

    @property
    def final_pools(self) -> np.ndarray:
        return self.final_config.pools()


class _Layout:
    """Index bookkeeping shared by both formulations."""

    def __init__(self, config: Configuration):
        for i, c in enumerate(config.cfmms):
            if c.function.is_linear:
                raise ValueError(f"CFMM {i}: trade-only protection supports constant-product and weighted CFMMs only")
        self.config = config
        self.tokens = list(config.tokens)
        index = {t: n for n, t in enumerate(self.tokens)}
        self.pair = np.array([[index[a], index[b]] for a, b in (c.tokens for c in config.cfmms)])
        self.e = np.array([c.function.exponents for c in config.cfmms], dtype=float)
        self.log_k = np.log([liquidity(c) for c in config.cfmms])
        totals = config.token_totals()
        self.supply = np.array([totals[t] for t in self.tokens])
        self.n, self.T = len(config.cfmms), len(self.tokens)

    def pools_at(self, u):
        """Log-pools on each level set where spot prices match ``exp(u)`` ratios."""
        e1, e2 = self.e[:, 0], self.e[:, 1]
        log_r = u[self.pair[:, 0]] - u[self.pair[:, 1]] + np.log(e2 / e1)
        log_x1 = (self.log_k - e2 * log_r) / (e1 + e2)
        return np.column_stack([log_x1, log_x1 + log_r])

    def sigma(self, pools):
        held = np.zeros(self.T)
        np.add.at(held, self.pair.reshape(-1), pools.reshape(-1))
        return self.supply - held


def _full_u(free):
    return np.concatenate([[0.0], free])


def _elimination_objective(layout: _Layout):
    s = layout.e.sum(axis=1)
    d1 = -layout.e[:, 1] / s  # d log x1 / d log price
    d2 = layout.e[:, 0] / s  # d log x2 / d log price

    def fun(free):
        u = _full_u(free)
        with np.errstate(over="ignore"):
            x = np.exp(layout.pools_at(u))
        sig = layout.sigma(x)
        val = float(sig @ sig)
        # d sigma_t / d log price_i for the two pools of CFMM i
        g_price = -2.0 * (sig[layout.pair[:, 0]] * x[:, 0] * d1 + sig[layout.pair[:, 1]] * x[:, 1] * d2)
        grad = np.zeros(layout.T)
        np.add.at(grad, layout.pair[:, 0], g_price)
        np.add.at(grad, layout.pair[:, 1], -g_price)
        if not math.isfinite(val):
            return math.inf, np.zeros(layout.T - 1)
        return val, grad[1:]

    return fun


def _penalty_objective(layout: _Layout, mu: float):
    """Sum of squared slacks plus ``mu`` times squared constraint residuals.

    Variables are log-pools (2n) followed by free log-valuations (T-1).
    """
    n, T = layout.n, layout.T
    e1, e2 = layout.e[:, 0], layout.e[:, 1]
    shift = np.log(e2 / e1)

    def fun(w):
        xi = w[: 2 * n].reshape(n, 2)
        u = _full_u(w[2 * n :])
        with np.errstate(over="ignore"):
            x = np.exp(xi)
        sig = layout.sigma(x)
        c_inv = e1 * xi[:, 0] + e2 * xi[:, 1] - layout.log_k
        c_price = xi[:, 1] - xi[:, 0] - (u[layout.pair[:, 0]] - u[layout.pair[:, 1]] + shift)
        val = float(sig @ sig + mu * (c_inv @ c_inv + c_price @ c_price))
        if not math.isfinite(val):
            return math.inf, np.zeros_like(w)
        g_xi = np.empty((n, 2))
        g_xi[:, 0] = -2.0 * sig[layout.pair[:, 0]] * x[:, 0] + 2 * mu * (c_inv * e1 - c_price)
        g_xi[:, 1] = -2.0 * sig[layout.pair[:, 1]] * x[:, 1] + 2 * mu * (c_inv * e2 + c_price)
        g_u = np.zeros(T)
        np.add.at(g_u, layout.pair[:, 0], -2 * mu * c_price)
        np.add.at(g_u, layout.pair[:, 1], 2 * mu * c_price)
        return val, np.concatenate([g_xi.reshape(-1), g_u[1:]])

    return fun


def _initial_valuation(layout: _Layout) -> np.ndarray:
    """Log-valuation from spanning-tree propagation of current spot prices."""
    config = layout.config
    u = np.zeros(layout.T)
    index = {t: n for n, t in enumerate(layout.tokens)}
    for comp in _components(config):
        pot = _tree_potentials(config, comp)
        for t, v in pot.items():
            u[index[t]] = v
    return u - u[0]


def _start_points(layout: _Layout, opts: TradeOnlyOptions) -> np.ndarray:
    base = _initial_valuation(layout)[1:]
    dim = layout.T - 1
    starts = [base]
    if opts.starts > 1 and dim > 0:
        pts = qmc.Halton(d=dim, scramble=False).random(opts.starts)[1:]  # first point is the origin
        starts += [base + opts.start_spread * (2 * p - 1) for p in pts]
    elif opts.starts > 1:
        starts += [base] * (opts.starts - 1)
    return np.array(starts[: max(1, opts.starts)])


def _feasibility_residual(layout: _Layout, u, log_pools) -> float:
    if not np.all(np.isfinite(log_pools)):
        return math.inf
    e1, e2 = layout.e[:, 0], layout.e[:, 1]
    inv = np.abs(np.expm1(e1 * log_pools[:, 0] + e2 * log_pools[:, 1] - layout.log_k))
    price = np.abs(np.expm1(log_pools[:, 1] - log_pools[:, 0] - np.log(e2 / e1) - (u[layout.pair[:, 0]] - u[layout.pair[:, 1]])))
    return float(max(inv.max(initial=0.0), price.max(initial=0.0)))


def _solve_from(layout: _Layout, start, opts: TradeOnlyOptions) -> np.ndarray:
    """Locally optimal free log-valuation reached from ``start``."""
    if layout.T == 1:
        return start
    if opts.method == "elimination":
        res = minimize(_elimination_objective(layout), start, jac=True, method="BFGS", options={"gtol": opts.gtol, "maxiter": 2000})
        return res.x
    # penalty route: start on the closed-form level sets, then tighten mu
    xi = layout.pools_at(_full_u(start)).reshape(-1)
    w = np.concatenate([xi, start])
    mu = opts.penalty_start
    for _ in range(opts.penalty_stages):
        res = minimize(_penalty_objective(layout, mu), w, jac=True, method="BFGS", options={"gtol": 1e-10, "maxiter": 5000})
        w = res.x
        mu *= 10.0
    return w[2 * layout.n :]


def solve_trade_only(config: Configuration, opts: TradeOnlyOptions | None = None) -> TradeOnlyResult:
    """Minimise squared per-token slack over liquidity-preserving, arbitrage-free endpoints.

    The best start wins (ties go to the lower start index); every start's end
    point is re-projected exactly onto the constraint set before scoring.

    Raises
    ------
    ValueError
        For linear CFMMs or an unknown method.
    NoFeasiblePoint
        If no start ends within ``1e-8`` of the constraint set.
    """
    opts = opts or TradeOnlyOptions()
    if opts.method not in ("elimination", "penalty"):
        raise ValueError(f"unknown method {opts.method!r}")
    layout = _Layout(config)
    best = None
    for idx, start in enumerate(_start_points(layout, opts)):
        free = _solve_from(layout, np.asarray(start, dtype=float), opts)
        u = _full_u(free)
        with np.errstate(over="ignore", invalid="ignore"):
            log_pools = layout.pools_at(u)
            resid = _feasibility_residual(layout, u, log_pools)
        if not resid <= FEASIBILITY_TOL:
            log.debug("start %d infeasible (residual %.3g)", idx, resid)
            continue
        pools = np.exp(log_pools)
        sig = layout.sigma(pools)
        obj = float(sig @ sig)
        log.debug("start %d: objective %.12g", idx, obj)
        if best is None or obj < best[0]:
            best = (obj, idx, u, pools, sig)
    if best is None:
        raise NoFeasiblePoint("no start reached the liquidity and valuation constraints")
    obj, idx, u, pools, sig = best
    return TradeOnlyResult(
        config.with_pools(pools),
        {t: float(s) for t, s in zip(layout.tokens, sig)},
        {t: float(math.exp(v)) for t, v in zip(layout.tokens, u)},
        obj,
        idx,
        opts.method,
    )
