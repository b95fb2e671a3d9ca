"""Arbitrage detection and liquidity rebalancing for networks of two-pool CFMMs."""

from .arbitrage import Free, Prone, arbitrage_to_rebalancing, cycle_profit, detect, optimal_cycle_arbitrage
from .model import (
    CfmmState,
    Configuration,
    Edge,
    Mode,
    Rebalancing,
    TradingFunction,
    apply_rebalancing,
    apply_trade,
    build_edges,
    liquidity,
    spot_price,
)
from .planner import ExecutionPlan, plan, simulate
from .scenarios import GenSpec, generate
from .serialization import load_scenario
from .solver import RebalanceProblem, RebalanceSolution, SolverOptions, objective_value, solve, verify
from .trade_only import TradeOnlyOptions, solve_trade_only

__version__ = "0.1.0"

__all__ = [
    "CfmmState",
    "Configuration",
    "Edge",
    "ExecutionPlan",
    "Free",
    "GenSpec",
    "Mode",
    "Prone",
    "Rebalancing",
    "RebalanceProblem",
    "RebalanceSolution",
    "SolverOptions",
    "TradeOnlyOptions",
    "TradingFunction",
    "apply_rebalancing",
    "apply_trade",
    "arbitrage_to_rebalancing",
    "build_edges",
    "cycle_profit",
    "detect",
    "generate",
    "liquidity",
    "load_scenario",
    "objective_value",
    "optimal_cycle_arbitrage",
    "plan",
    "simulate",
    "solve",
    "solve_trade_only",
    "spot_price",
    "verify",
]
