"""JSON formats for scenarios, plans and reports (schema version ``v1``).

Amounts travel as decimal strings.  Scenario and plan files use the shortest
string that round-trips the float exactly; human-facing reports use 12
significant digits so output is stable across platforms.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import InvalidConfiguration, ScenarioFormatError
from .model import CfmmState, Configuration, Mode, TradingFunction
from .planner import Borrow, ExecutionPlan, PoolRef, Repay, Trade, Transfer

VERSION = "v1"

_PARAM_NAMES = {"constant_product": (), "weighted": ("w1", "w2"), "linear": ("a", "b")}


def exact(x: float) -> str:
    """Shortest decimal string that parses back to the same float."""
    x = float(x)
    return repr(0.0 if x == 0 else x)


def fmt(x: float) -> str:
    """Report formatting: 12 significant digits, no negative zero."""
    x = float(x)
    return "0" if x == 0 else format(x, ".12g")


def _num(value, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (str, int, float)):
        raise ScenarioFormatError(f"{what}: expected a decimal string, got {value!r}")
    try:
        out = float(value)
    except ValueError:
        raise ScenarioFormatError(f"{what}: {value!r} is not a number") from None
    if not math.isfinite(out):
        raise ScenarioFormatError(f"{what}: {value!r} is not finite")
    return out


def _function_from(d, where: str) -> TradingFunction:
    if not isinstance(d, dict) or "kind" not in d:
        raise ScenarioFormatError(f"{where}: function needs a 'kind'")
    kind = d["kind"]
    if kind not in _PARAM_NAMES:
        raise ScenarioFormatError(f"{where}: unknown function kind {kind!r}")
    params = d.get("params") or {}
    if kind == "constant_product":
        return TradingFunction.constant_product()
    names = _PARAM_NAMES[kind]
    if kind == "weighted" and "w2" not in params and "w1" in params:
        return TradingFunction.weighted(_num(params["w1"], f"{where}.w1"))
    try:
        values = [_num(params[n], f"{where}.{n}") for n in names]
    except KeyError as e:
        raise ScenarioFormatError(f"{where}: missing parameter {e}") from None
    return TradingFunction(kind, tuple(values))


def scenario_from_dict(data) -> tuple[Configuration, tuple | None]:
    """Parse a scenario document into a configuration and optional explicit edges."""
    try:
        if not isinstance(data, dict):
            raise ScenarioFormatError("scenario must be a JSON object")
        if data.get("version") != VERSION:
            raise ScenarioFormatError(f"unsupported scenario version {data.get('version')!r}")
        raw = data.get("cfmms")
        if not isinstance(raw, list) or not raw:
            raise ScenarioFormatError("scenario needs a non-empty 'cfmms' list")
        cfmms = []
        for n, c in enumerate(raw):
            where = f"cfmms[{n}]"
            if not isinstance(c, dict):
                raise ScenarioFormatError(f"{where} must be an object")
            pools, tokens = c.get("pools"), c.get("tokens")
            if not (isinstance(pools, list) and len(pools) == 2 and isinstance(tokens, list) and len(tokens) == 2):
                raise ScenarioFormatError(f"{where}: need two pools and two tokens")
            cfmms.append(
                CfmmState(
                    (_num(pools[0], f"{where}.pools[0]"), _num(pools[1], f"{where}.pools[1]")),
                    (tokens[0], tokens[1]),
                    _function_from(c.get("function", {"kind": "constant_product"}), where),
                    _num(c.get("fee", "1"), f"{where}.fee"),
                    Mode(c.get("mode", "active")),
                    c.get("name"),
                )
            )
        tokens = data.get("tokens") or ()
        config = Configuration(tuple(cfmms), tuple(tokens))
        edges = data.get("edges")
        if edges is not None:
            if not isinstance(edges, list):
                raise ScenarioFormatError("'edges' must be a list of [i, j, k, l]")
            edges = tuple(tuple(int(v) for v in e) for e in edges)
        return config, edges
    except ScenarioFormatError:
        raise
    except (InvalidConfiguration, ValueError, TypeError) as e:
        raise ScenarioFormatError(str(e)) from e


def scenario_to_dict(config: Configuration, edges=None) -> dict:
    cfmms = []
    for c in config.cfmms:
        names = _PARAM_NAMES[c.function.kind]
        entry = {}
        if c.name is not None:
            entry["name"] = c.name
        entry.update(
            {
                "pools": [exact(x) for x in c.pools],
                "tokens": list(c.tokens),
                "function": {"kind": c.function.kind, "params": {n: exact(v) for n, v in zip(names, c.function.params)}},
                "fee": exact(c.gamma),
                "mode": c.mode.value,
            }
        )
        cfmms.append(entry)
    out = {"version": VERSION, "tokens": list(config.tokens), "cfmms": cfmms}
    if edges is not None:
        out["edges"] = [list(e) for e in edges]
    return out


def dumps(data) -> str:
    return json.dumps(data, indent=2) + "\n"


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ScenarioFormatError(f"{path}: {e}") from e


def load_scenario(path) -> tuple[Configuration, tuple | None]:
    return scenario_from_dict(load_json(path))


def _ref(ref):
    return None if ref is None else {"cfmm": ref.cfmm, "pool": ref.pool}


def _basket(basket, num):
    return {t: num(a) for t, a in sorted(basket.items())}


def plan_to_dict(plan: ExecutionPlan, num=exact) -> list:
    steps = []
    for s in plan.steps:
        if isinstance(s, Transfer):
            steps.append({"type": "transfer", "from": _ref(s.source), "to": _ref(s.target), "token": s.token, "amount": num(s.amount)})
        elif isinstance(s, Trade):
            steps.append(
                {
                    "type": "trade",
                    "cfmm": s.cfmm,
                    "token_in": s.token_in,
                    "amount_in": num(s.amount_in),
                    "token_out": s.token_out,
                    "expected_out": num(s.expected_out),
                    "gamma": num(s.gamma),
                }
            )
        elif isinstance(s, Borrow):
            steps.append({"type": "borrow", "basket": _basket(s.basket, num)})
        elif isinstance(s, Repay):
            steps.append({"type": "repay", "basket": _basket(s.basket, num)})
    return steps


def plan_document(plan: ExecutionPlan, problem, num=exact) -> dict:
    """Self-contained plan file: the rebalancing problem it solves plus its steps."""
    return {
        "version": VERSION,
        "problem": {
            "active": None if problem.active is None else list(problem.active),
            "weights": [num(w) for w in problem.weights],
            "use_fees": problem.use_fees,
            "edges": [list(e) for e in problem.edges],
        },
        "borrow_basket": _basket(plan.borrow_basket, num),
        "steps": plan_to_dict(plan, num),
        "expected_final_pools": [[num(x) for x in row] for row in np.asarray(plan.expected_final_pools)],
    }


def _ref_from(d, where):
    if d is None:
        return None
    try:
        return PoolRef(int(d["cfmm"]), int(d["pool"]))
    except (KeyError, TypeError, ValueError):
        raise ScenarioFormatError(f"{where}: pool reference needs 'cfmm' and 'pool'") from None


def plan_from_dict(data) -> tuple[ExecutionPlan, dict]:
    """Parse a plan document; returns the plan and its raw ``problem`` section."""
    if not isinstance(data, dict) or data.get("version") != VERSION:
        raise ScenarioFormatError("plan must be a v1 JSON object")
    steps = []
    try:
        for n, s in enumerate(data["steps"]):
            where = f"steps[{n}]"
            kind = s.get("type")
            if kind == "transfer":
                steps.append(Transfer(_ref_from(s.get("from"), where), _ref_from(s.get("to"), where), s["token"], _num(s["amount"], where)))
            elif kind == "trade":
                steps.append(
                    Trade(
                        int(s["cfmm"]),
                        s["token_in"],
                        _num(s["amount_in"], where),
                        s["token_out"],
                        _num(s["expected_out"], where),
                        _num(s.get("gamma", "1"), where),
                    )
                )
            elif kind in ("borrow", "repay"):
                basket = {t: _num(a, where) for t, a in s["basket"].items()}
                steps.append(Borrow(basket) if kind == "borrow" else Repay(basket))
            else:
                raise ScenarioFormatError(f"{where}: unknown step type {kind!r}")
        borrow = {t: _num(a, "borrow_basket") for t, a in data.get("borrow_basket", {}).items()}
        final = data.get("expected_final_pools")
        final = None if final is None else np.array([[_num(x, "expected_final_pools") for x in row] for row in final])
    except (KeyError, TypeError, AttributeError) as e:
        raise ScenarioFormatError(f"malformed plan: {e}") from e
    return ExecutionPlan(tuple(steps), borrow, final), data.get("problem") or {}
