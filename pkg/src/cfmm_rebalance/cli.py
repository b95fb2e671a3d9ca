"""Command-line entry point.

Machine-readable JSON goes to stdout, a short human summary to stderr.

Exit codes: 0 success (or arbitrage-free / verified), 2 unreadable or invalid
input, 3 arbitrage-prone, 4 solver failure, 5 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .arbitrage import DEFAULT_TOL, Free, detect
from .errors import (
    InconsistentPassiveDelta,
    InfeasibleSpec,
    InvalidConfiguration,
    NoFeasiblePoint,
    PlanMismatch,
    ScenarioFormatError,
    SolverDiverged,
    StepInfeasible,
)
from .planner import MATCH_RTOL, RESIDUE_ATOL, max_relative_error, plan, replay
from .scenarios import GenSpec, corpus_spec, generate
from .serialization import (
    VERSION,
    dumps,
    fmt,
    load_json,
    load_scenario,
    plan_document,
    plan_from_dict,
    plan_to_dict,
    scenario_from_dict,
    scenario_to_dict,
)
from .solver import RebalanceProblem, RebalanceSolution, SolverOptions, solve, verify
from .trade_only import TradeOnlyOptions, solve_trade_only

EXIT_OK, EXIT_INPUT, EXIT_PRONE, EXIT_DIVERGED, EXIT_FAILED = 0, 2, 3, 4, 5

log = logging.getLogger("cfmm_rebalance")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _detect_report(path: str, tol: float, fee_aware: bool) -> tuple[int, dict]:
    try:
        config, _ = load_scenario(path)
    except ScenarioFormatError as e:
        return EXIT_INPUT, {"file": path, "error": str(e)}
    cert = detect(config, tol, fee_aware=fee_aware)
    if isinstance(cert, Free):
        return EXIT_OK, {"file": path, "verdict": "free", "valuation": {t: fmt(v) for t, v in cert.valuation.items()}}
    cycle = [{"cfmm": leg.cfmm, "token_in": leg.token_in, "token_out": leg.token_out} for leg in cert.cycle]
    return EXIT_PRONE, {"file": path, "verdict": "prone", "cycle": cycle, "log_gain": fmt(cert.log_gain)}


def cmd_detect(args) -> int:
    if args.jobs > 1 and len(args.scenario) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_detect_report, args.scenario, [args.tol] * len(args.scenario), [args.fee_aware] * len(args.scenario)))
    else:
        results = [_detect_report(p, args.tol, args.fee_aware) for p in args.scenario]
    for code, rep in results:
        if code == EXIT_INPUT:
            _say(f"{rep['file']}: error: {rep['error']}")
        else:
            _say(f"{rep['file']}: arbitrage-{rep['verdict']}")
    if len(results) == 1:
        out = {"version": VERSION, **results[0][1]}
    else:
        out = {"version": VERSION, "reports": [r for _, r in results]}
    print(dumps(out), end="")
    codes = [c for c, _ in results]
    return EXIT_INPUT if EXIT_INPUT in codes else EXIT_PRONE if EXIT_PRONE in codes else EXIT_OK


def _problem(args, config, edges) -> RebalanceProblem:
    weights = None
    if args.weights:
        weights = tuple(float(w) for w in args.weights.split(","))
    kwargs = {"edges": edges, "weights": weights, "use_fees": args.fees}
    # passive or oracle CFMMs in the file make the problem restricted either way
    if args.restricted or args.active is not None or any(not c.is_active for c in config.cfmms):
        active = None if args.active is None else [int(i) for i in args.active.split(",")]
        return RebalanceProblem.restricted(config, active, **kwargs)
    return RebalanceProblem.full(config, **kwargs)


def _solve_from_args(args):
    config, edges = load_scenario(args.scenario)
    problem = _problem(args, config, edges)
    opts = SolverOptions(tol=args.tol, max_iter=args.max_iter, oracle_negative_pools=args.oracle_negative_pools)
    solution = solve(problem, opts)
    return config, problem, solution


def _solution_report(config, solution: RebalanceSolution, execution) -> dict:
    return {
        "version": VERSION,
        "status": solution.status,
        "mode": "restricted" if solution.problem.is_restricted else "full",
        "final_pools": [[fmt(x) for x in row] for row in solution.final_pools],
        "liquidities_before": [fmt(k) for k in solution.liquidities_before],
        "liquidities_after": [fmt(k) for k in solution.liquidities_after],
        "objective_value": fmt(solution.objective_value),
        "improvement": fmt(solution.improvement),
        "kkt_residual": fmt(solution.kkt_residual),
        "transfers": [
            {"edge": list(e), "amount": fmt(d)} for e, d in sorted(solution.canonical_deltas.deltas.items())
        ],
        "plan": {
            "borrow_basket": {t: fmt(a) for t, a in sorted(execution.borrow_basket.items())},
            "steps": plan_to_dict(execution, fmt),
        },
    }


def cmd_rebalance(args) -> int:
    try:
        config, problem, solution = _solve_from_args(args)
        execution = plan(config, solution)
    except (ScenarioFormatError, InvalidConfiguration, ValueError) as e:
        _say(f"error: {e}")
        return EXIT_INPUT
    except SolverDiverged as e:
        _say(f"solver diverged: {e}")
        return EXIT_DIVERGED
    except InconsistentPassiveDelta as e:
        _say(f"planning failed: {e}")
        return EXIT_DIVERGED
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(dumps(plan_document(execution, problem)))
    print(dumps(_solution_report(config, solution, execution)), end="")
    before = " ".join(fmt(k) for k in solution.liquidities_before)
    after = " ".join(fmt(k) for k in solution.liquidities_after)
    _say(f"{solution.status}: liquidities {before} -> {after}; {len(execution)} plan steps")
    return EXIT_OK


def cmd_plan(args) -> int:
    try:
        config, problem, solution = _solve_from_args(args)
        execution = plan(config, solution)
    except (ScenarioFormatError, InvalidConfiguration, ValueError) as e:
        _say(f"error: {e}")
        return EXIT_INPUT
    except (SolverDiverged, InconsistentPassiveDelta) as e:
        _say(f"error: {e}")
        return EXIT_DIVERGED
    doc = dumps(plan_document(execution, problem))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(doc)
    print(doc, end="")
    _say(f"{len(execution)} steps, borrow basket {execution.borrow_basket or 'empty'}")
    return EXIT_OK


def cmd_trade_only(args) -> int:
    try:
        config, _ = load_scenario(args.scenario)
        opts = TradeOnlyOptions(starts=args.starts, penalty_stages=args.penalty_stages, method=args.method)
        result = solve_trade_only(config, opts)
    except (ScenarioFormatError, InvalidConfiguration, ValueError) as e:
        _say(f"error: {e}")
        return EXIT_INPUT
    except NoFeasiblePoint as e:
        _say(f"error: {e}")
        return EXIT_DIVERGED
    out = {
        "version": VERSION,
        "sigma": {t: fmt(s) for t, s in result.sigma.items()},
        "valuation": {t: fmt(v) for t, v in result.valuation.items()},
        "final_pools": [[fmt(x) for x in row] for row in result.final_pools],
        "objective": fmt(result.objective),
        "start_index": result.start_index,
        "method": result.method,
    }
    print(dumps(out), end="")
    _say(f"objective {fmt(result.objective)} (positive sigma = withdrawn)")
    return EXIT_OK


def _verification(config, plan_doc) -> dict:
    execution, spec = plan_from_dict(plan_doc)
    checks = []

    def add(name, passed, residual, detail=""):
        checks.append({"name": name, "passed": bool(passed), "residual": fmt(residual), "detail": detail})

    try:
        problem = RebalanceProblem(
            config,
            edges=spec.get("edges"),
            weights=spec.get("weights"),
            active=None if spec.get("active") is None else tuple(spec["active"]),
            use_fees=bool(spec.get("use_fees", False)),
        )
    except (InvalidConfiguration, ValueError, TypeError) as e:
        add("problem", False, float("nan"), str(e))
        return {"passed": False, "checks": checks}
    try:
        result = replay(config, execution)
    except StepInfeasible as e:
        add("plan_replay", False, float("nan"), str(e))
        return {"passed": False, "checks": checks}
    add("plan_replay", True, 0.0)
    residue = max((abs(v) for v in result.residue.values()), default=0.0)
    add("agent_residue", residue <= RESIDUE_ATOL, residue)
    if execution.expected_final_pools is not None:
        want = np.asarray(execution.expected_final_pools)
        got = result.final_config.pools()
        err = max_relative_error(got, want) if got.shape == want.shape else float("inf")
        add("expected_pools", err <= MATCH_RTOL, err)
    report = verify(problem, RebalanceSolution.from_final_config(problem, result.final_config))
    for c in report.checks:
        add(c.name, c.passed, c.residual, c.detail)
    return {"passed": all(c["passed"] for c in checks), "checks": checks}


def cmd_verify(args) -> int:
    try:
        config, _ = load_scenario(args.scenario)
        doc = load_json(args.plan)
        plan_from_dict(doc)
    except ScenarioFormatError as e:
        _say(f"error: {e}")
        return EXIT_INPUT
    try:
        outcome = _verification(config, doc)
    except PlanMismatch as e:
        outcome = {"passed": False, "checks": [{"name": "plan", "passed": False, "residual": "nan", "detail": str(e)}]}
    print(dumps({"version": VERSION, **outcome}), end="")
    for c in outcome["checks"]:
        _say(f"{'ok  ' if c['passed'] else 'FAIL'} {c['name']} (residual {c['residual']}) {c['detail']}".rstrip())
    return EXIT_OK if outcome["passed"] else EXIT_FAILED


def cmd_gen(args) -> int:
    try:
        if args.corpus:
            spec = corpus_spec(args.seed)
        else:
            spec = GenSpec(
                seed=args.seed,
                n_cfmms=args.n_cfmms,
                n_tokens=args.n_tokens,
                pool_range=(args.pool_min, args.pool_max),
                active_fraction=args.active_fraction,
                oracle_count=args.oracles,
                fee_range=(args.fee_min, args.fee_max),
                ensure_connected=not args.disconnected,
                weighted_fraction=args.weighted_fraction,
            )
        config = generate(spec)
    except InfeasibleSpec as e:
        _say(f"error: {e}")
        return EXIT_INPUT
    doc = dumps(scenario_to_dict(config))
    scenario_from_dict(scenario_to_dict(config))  # the file we emit must parse
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(doc)
    else:
        print(doc, end="")
    _say(f"generated {len(config.cfmms)} CFMMs over {len(config.tokens)} tokens (seed {spec.seed})")
    return EXIT_OK


def _add_solver_flags(p) -> None:
    p.add_argument("scenario")
    p.add_argument("--restricted", action="store_true", help="only CFMMs marked active take transfers and count in the objective")
    p.add_argument("--active", help="comma-separated active CFMM indices (implies --restricted)")
    p.add_argument("--weights", help="comma-separated objective weights, one per CFMM")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=200, help="Newton iterations per barrier stage")
    p.add_argument("--fees", action="store_true", help="charge passive CFMM fees on agent trades")
    p.add_argument("--oracle-negative-pools", action="store_true", help="let oracle pools go negative instead of padding reserves")
    p.add_argument("--out", help="write the execution plan to this file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfmm-rebalance", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="classify scenarios as arbitrage-free or arbitrage-prone")
    p.add_argument("scenario", nargs="+")
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.add_argument("--fee-aware", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("rebalance", help="solve for the optimal rebalancing and its execution plan")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_rebalance)

    p = sub.add_parser("plan", help="emit only the execution plan")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("trade-only", help="minimal slack protection using trades alone")
    p.add_argument("scenario")
    p.add_argument("--starts", type=int, default=16)
    p.add_argument("--penalty-stages", type=int, default=6)
    p.add_argument("--method", choices=("elimination", "penalty"), default="elimination")
    p.set_defaults(func=cmd_trade_only)

    p = sub.add_parser("verify", help="replay a plan and check the resulting configuration")
    p.add_argument("scenario")
    p.add_argument("plan")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen", help="generate a random scenario")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--corpus", action="store_true", help="use the standard corpus recipe for this seed")
    p.add_argument("--n-cfmms", type=int, default=3)
    p.add_argument("--n-tokens", type=int, default=3)
    p.add_argument("--pool-min", type=float, default=0.1)
    p.add_argument("--pool-max", type=float, default=10.0)
    p.add_argument("--active-fraction", type=float, default=1.0)
    p.add_argument("--oracles", type=int, default=0)
    p.add_argument("--fee-min", type=float, default=1.0)
    p.add_argument("--fee-max", type=float, default=1.0)
    p.add_argument("--weighted-fraction", type=float, default=0.0)
    p.add_argument("--disconnected", action="store_true", help="do not force a connected token graph")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("REBALANCER_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
