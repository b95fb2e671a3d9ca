"""Liquidity rebalancing as a convex program, solved by a primal log-barrier method.

The program maximises ``sum_i w_i log F_i(x'_i)`` over the CFMMs in scope subject
to conservation of every token, positivity of the final pools and
``F_i(x') >= F_i(x)`` for every CFMM.  Final pools are affine in the transfers,
so the solver works on an orthonormal basis of the conservation null space and
recovers a minimum-norm transfer vector afterwards.

Restricted problems keep every CFMM's pools as variables but score only the
active ones.  Passive CFMMs therefore end on their original level set, which is
exactly what a standard trade can reach.  With fees enabled each passive pool
gets separate inflow and outflow variables so that only ``gamma`` of what the
agent pays in reaches the pool.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import null_space

from .arbitrage import Free, detect
from .errors import InvalidConfiguration, NonPositiveLiquidity, SolverDiverged
from .model import (
    CONSERVATION_ATOL,
    Configuration,
    Edge,
    EdgeSet,
    Rebalancing,
    build_edges,
    liquidity,
    trade_output,
    validate_edges,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverOptions:
    """Barrier-method settings.

    Attributes
    ----------
    tol : float
        Target for the KKT residual (duality gap and scaled stationarity).
    max_iter : int
        Newton iterations allowed per barrier stage.
    max_stages : int
        Barrier-parameter decreases after the first centring.
    mu_factor : float
        Geometric decrease of the barrier parameter per stage.
    oracle_negative_pools : bool
        Let oracle pools go negative instead of padding them with synthetic reserves.
    oracle_reserve_factor : float
        Synthetic oracle reserves, as a multiple of the matching token's supply.
    """

    tol: float = 1e-8
    max_iter: int = 200
    max_stages: int = 12
    mu_factor: float = 0.2
    newton_tol: float = 1e-10
    oracle_negative_pools: bool = False
    oracle_reserve_factor: float = 1e3
    phase1_tol: float = 1e-10
    phase1_max_stages: int = 40


@dataclass(frozen=True)
class RebalanceProblem:
    """A configuration plus the choices that define one rebalancing program.

    ``active=None`` means the full program (every CFMM active and scored);
    otherwise only the listed CFMMs may take direct transfers and enter the
    objective.
    """

    config: Configuration
    edges: EdgeSet | None = None
    weights: tuple[float, ...] | None = None
    active: tuple[int, ...] | None = None
    use_fees: bool = False

    def __post_init__(self):
        n = len(self.config.cfmms)
        edges = build_edges(self.config) if self.edges is None else validate_edges(self.config, self.edges)
        object.__setattr__(self, "edges", edges)
        weights = (1.0,) * n if self.weights is None else tuple(float(w) for w in self.weights)
        if len(weights) != n or not all(w > 0 and math.isfinite(w) for w in weights):
            raise InvalidConfiguration(f"need {n} positive weights, got {weights}")
        object.__setattr__(self, "weights", weights)
        if self.active is None:
            if any(c.is_oracle for c in self.config.cfmms):
                raise InvalidConfiguration("oracle CFMMs are passive; use a restricted problem")
        else:
            active = tuple(sorted({int(i) for i in self.active}))
            if not active:
                raise InvalidConfiguration("a restricted problem needs at least one active CFMM")
            if not all(0 <= i < n for i in active):
                raise InvalidConfiguration(f"active indices {active} out of range")
            if any(self.config.cfmms[i].is_oracle for i in active):
                raise InvalidConfiguration("oracle CFMMs cannot be active")
            object.__setattr__(self, "active", active)

    @classmethod
    def full(cls, config: Configuration, **kwargs) -> RebalanceProblem:
        return cls(config, active=None, **kwargs)

    @classmethod
    def restricted(cls, config: Configuration, active: Sequence[int] | None = None, **kwargs) -> RebalanceProblem:
        if active is None:
            active = [i for i, c in enumerate(config.cfmms) if c.is_active]
        return cls(config, active=tuple(active), **kwargs)

    @property
    def is_restricted(self) -> bool:
        return self.active is not None

    @property
    def active_mask(self) -> np.ndarray:
        n = len(self.config.cfmms)
        if self.active is None:
            return np.ones(n, dtype=bool)
        mask = np.zeros(n, dtype=bool)
        mask[list(self.active)] = True
        return mask

    @property
    def gammas(self) -> np.ndarray:
        """Fee factors on passive inflows (1 where fees do not apply)."""
        g = np.ones(len(self.config.cfmms))
        if self.use_fees:
            for i, c in enumerate(self.config.cfmms):
                if not self.active_mask[i]:
                    g[i] = c.gamma
        return g


@dataclass(frozen=True)
class RebalanceSolution:
    problem: RebalanceProblem
    final_config: Configuration
    agent_flows: np.ndarray  # tokens the agent pays into each pool; negative = withdrawn
    canonical_deltas: Rebalancing
    objective_value: float
    initial_objective: float
    kkt_residual: float
    iterations: int
    status: str  # "optimal", "no_improvement" or "replayed"

    @property
    def improvement(self) -> float:
        return self.objective_value - self.initial_objective

    @property
    def final_pools(self) -> np.ndarray:
        return self.final_config.pools()

    @property
    def liquidities_before(self) -> np.ndarray:
        return self.problem.config.liquidities()

    @property
    def liquidities_after(self) -> np.ndarray:
        return self.final_config.liquidities()

    @classmethod
    def from_final_config(cls, problem: RebalanceProblem, final_config: Configuration) -> RebalanceSolution:
        """Wrap an externally produced final configuration (e.g. a replayed plan) for checking."""
        delta = final_config.pools() - problem.config.pools()
        flows = _flows_from_changes(delta, problem.gammas)
        scope = problem.active_mask
        return cls(
            problem,
            final_config,
            flows,
            _canonical_deltas(problem, flows),
            objective_value(final_config, problem.weights, scope),
            objective_value(problem.config, problem.weights, scope),
            math.nan,
            0,
            "replayed",
        )


def objective_value(config: Configuration, weights=None, scope=None) -> float:
    """Weighted sum of log-liquidities over the CFMMs selected by ``scope``."""
    n = len(config.cfmms)
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    scope = np.ones(n, dtype=bool) if scope is None else np.asarray(scope, dtype=bool)
    total = 0.0
    for i in np.flatnonzero(scope):
        k = liquidity(config.cfmms[i])
        if not k > 0:
            raise NonPositiveLiquidity(f"CFMM {i} has liquidity {k}")
        total += weights[i] * math.log(k)
    return total


def _flows_from_changes(delta: np.ndarray, gammas: np.ndarray) -> np.ndarray:
    flows = delta.copy()
    inflow = delta > 0
    flows[inflow] = (delta / gammas[:, None])[inflow]
    return flows


def _pool_components(n: int, edges: EdgeSet) -> np.ndarray:
    """Label each pool (flattened ``2*i + j``) by its connected component under ``edges``."""
    parent = list(range(2 * n))

    def find(p):
        while parent[p] != p:
            parent[p] = parent[parent[p]]
            p = parent[p]
        return p

    for i, j, k, l in edges:  # noqa: E741
        a, b = find(2 * i + j), find(2 * k + l)
        if a != b:
            parent[max(a, b)] = min(a, b)
    return np.array([find(p) for p in range(2 * n)])


def _cfmm_components(n: int, pool_labels: np.ndarray) -> list[list[int]]:
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    first: dict[int, int] = {}
    for p, label in enumerate(pool_labels):
        i = p // 2
        if label in first:
            a, b = find(first[label]), find(i)
            if a != b:
                parent[max(a, b)] = min(a, b)
        else:
            first[label] = i
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def _canonical_deltas(problem: RebalanceProblem, flows: np.ndarray) -> Rebalancing:
    edges = problem.edges
    if not edges or not np.any(flows):
        return Rebalancing({})
    n = len(problem.config.cfmms)
    incidence = np.zeros((2 * n, len(edges)))
    for e, (i, j, k, l) in enumerate(edges):  # noqa: E741
        incidence[2 * i + j, e] = -1.0
        incidence[2 * k + l, e] = 1.0
    delta, *_ = np.linalg.lstsq(incidence, flows.reshape(-1), rcond=None)
    return Rebalancing({Edge(*e): float(d) for e, d in zip(edges, delta) if d != 0.0})


class _Component:
    """Barrier terms for one connected group of CFMMs, over null-space coordinates."""

    def __init__(self, problem: RebalanceProblem, members: list[int], pool_labels: np.ndarray, opts: SolverOptions):
        config = problem.config
        self.members = members
        nc = len(members)
        self.nc = nc
        given = np.array([config.cfmms[i].pools for i in members], dtype=float)
        reserves = np.zeros((nc, 2))
        totals = config.token_totals()
        supply = {t: 0.0 for t in config.tokens}
        for c in config.cfmms:
            if not c.is_oracle:
                for t, x in zip(c.tokens, c.pools):
                    supply[t] += x
        del totals
        pos_mask = np.ones((nc, 2), dtype=bool)
        geo_e = np.zeros((nc, 2))
        lin_ab = np.zeros((nc, 2))
        is_lin = np.zeros(nc, dtype=bool)
        for n, i in enumerate(members):
            c = config.cfmms[i]
            if c.function.is_linear:
                is_lin[n] = True
                lin_ab[n] = c.function.params
            else:
                geo_e[n] = c.function.exponents
            if c.is_oracle:
                if opts.oracle_negative_pools:
                    pos_mask[n] = False
                else:
                    for j, t in enumerate(c.tokens):
                        reserves[n, j] = opts.oracle_reserve_factor * max(supply[t], 1.0) + max(0.0, -given[n, j])
        self.given = given
        self.base = given + reserves
        self.pos_mask = pos_mask.reshape(-1)
        self.geo_e, self.lin_ab, self.is_lin = geo_e, lin_ab, is_lin
        self.lin_norm = lin_ab.sum(axis=1)
        active = problem.active_mask[members]
        self.scope_w = np.where(active, np.asarray(problem.weights)[members], 0.0)
        gammas = problem.gammas[members]

        # variables: one per pool, or an (inflow, outflow) pair for fee-charging passive pools
        P = 2 * nc
        cols_D, cols_G, split = [], [], []
        for p in range(P):
            g = gammas[p // 2]
            if g < 1.0:
                d_u = np.zeros(P)
                d_u[p] = g
                g_u = np.zeros(P)
                g_u[p] = 1.0
                cols_D += [d_u, -g_u]
                cols_G += [g_u, -g_u]
                split += [len(cols_D) - 2, len(cols_D) - 1]
            else:
                e = np.zeros(P)
                e[p] = 1.0
                cols_D.append(e)
                cols_G.append(e)
        self.D = np.array(cols_D).T
        self.G = np.array(cols_G).T
        self.split = np.array(split, dtype=int)
        nv = self.D.shape[1]

        labels = pool_labels[np.array([2 * i + j for i in members for j in (0, 1)])]
        uniq = sorted(set(labels.tolist()))
        E = np.zeros((len(uniq), nv))
        for r, lab in enumerate(uniq):
            E[r] = self.G[labels == lab].sum(axis=0)
        self.N = null_space(E) if len(uniq) else np.eye(nv)
        self.y0 = np.zeros(nv)
        if len(self.split):
            scale = np.repeat(np.abs(self.base).reshape(-1)[:, None], 1, axis=1).reshape(-1)
            for q in self.split:
                p = int(np.flatnonzero(self.G[:, q])[0])
                self.y0[q] = 1e-6 * max(scale[p], 1e-6)
        self.M = self.D @ self.N
        self.Ns = self.N[self.split] if len(self.split) else np.zeros((0, self.N.shape[1]))
        self.m = int(self.pos_mask.sum()) + len(self.split) + nc
        rows = (2 * np.arange(nc)[:, None] + np.array([0, 0, 1, 1])[None, :]).reshape(-1)
        cols = (2 * np.arange(nc)[:, None] + np.array([0, 1, 0, 1])[None, :]).reshape(-1)
        self._block_idx = (rows, cols)

    @property
    def dim(self) -> int:
        return self.N.shape[1]

    def _state(self, z):
        y = self.y0 + self.N @ z
        delta = (self.D @ y).reshape(self.nc, 2)
        return y, delta, self.base + delta

    def _log_f(self, X):
        """log F, its gradient and Hessian blocks at effective pools ``X``."""
        nc = self.nc
        logf = np.empty(nc)
        grad = np.zeros((nc, 2))
        hess = np.zeros((nc, 2, 2))
        geo = ~self.is_lin
        if geo.any():
            Xg = X[geo]
            e = self.geo_e[geo]
            with np.errstate(divide="ignore", invalid="ignore"):
                logf[geo] = (e * np.log(Xg)).sum(axis=1)
            grad[geo] = e / Xg
            hess[geo, 0, 0] = -e[:, 0] / Xg[:, 0] ** 2
            hess[geo, 1, 1] = -e[:, 1] / Xg[:, 1] ** 2
        if self.is_lin.any():
            ab = self.lin_ab[self.is_lin]
            L = (ab * X[self.is_lin]).sum(axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                logf[self.is_lin] = np.log(L)
            grad[self.is_lin] = ab / L[:, None]
            hess[self.is_lin] = -ab[:, :, None] * ab[:, None, :] / (L**2)[:, None, None]
        return logf, grad, hess

    def _gain(self, delta, need_derivs=True):
        """Non-reduction slack: log-liquidity gain (geometric) or value gain (linear)."""
        nc = self.nc
        g = np.empty(nc)
        geo = ~self.is_lin
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = delta / self.base
            g[geo] = (self.geo_e[geo] * np.log1p(ratio[geo])).sum(axis=1)
        g[self.is_lin] = (self.lin_ab[self.is_lin] * delta[self.is_lin]).sum(axis=1) / self.lin_norm[self.is_lin]
        if not need_derivs:
            return g
        grad = np.zeros((nc, 2))
        hess = np.zeros((nc, 2, 2))
        X = self.base + delta
        grad[geo] = self.geo_e[geo] / X[geo]
        hess[geo, 0, 0] = -self.geo_e[geo, 0] / X[geo, 0] ** 2
        hess[geo, 1, 1] = -self.geo_e[geo, 1] / X[geo, 1] ** 2
        grad[self.is_lin] = self.lin_ab[self.is_lin] / self.lin_norm[self.is_lin, None]
        return g, grad, hess

    def _feasible(self, y, X, g, s):
        if np.any(X.reshape(-1)[self.pos_mask] <= 0):
            return False
        if len(self.split) and np.any(y[self.split] <= 0):
            return False
        return bool(np.all(g - s > 0))

    def barrier(self, w, t, phase1, need_derivs=True):
        """Value (and gradient/Hessian) of the centring objective at ``w``.

        Phase 1 maximises ``t*s`` with ``gain_i > s``; phase 2 maximises
        ``t * sum w_i log F_i`` with ``gain_i > 0``.  Both add log barriers for
        pool positivity and split-variable positivity.
        """
        z, s = (w[:-1], w[-1]) if phase1 else (w, 0.0)
        y, delta, X = self._state(z)
        if not need_derivs:
            g = self._gain(delta, need_derivs=False)
            if not self._feasible(y, X, g, s):
                return -math.inf
        else:
            g, gg, gh = self._gain(delta)
            if not self._feasible(y, X, g, s):
                return -math.inf, None, None
        Xf = X.reshape(-1)
        slack = g - s
        val = float(np.log(Xf[self.pos_mask]).sum() + np.log(slack).sum())
        if len(self.split):
            val += float(np.log(y[self.split]).sum())
        if phase1:
            val += t * s
        else:
            logf, lg, lh = self._log_f(X)
            scoped = self.scope_w > 0
            val += t * float((self.scope_w[scoped] * logf[scoped]).sum())
        if not need_derivs:
            return val

        inv_x = np.where(self.pos_mask, 1.0 / Xf, 0.0)
        grad_pool = inv_x + (gg / slack[:, None]).reshape(-1)
        blocks = gh / slack[:, None, None] - gg[:, :, None] * gg[:, None, :] / (slack**2)[:, None, None]
        if not phase1:
            grad_pool += (t * self.scope_w[:, None] * lg).reshape(-1)
            blocks = blocks + t * self.scope_w[:, None, None] * lh
        P = 2 * self.nc
        H_pool = np.zeros((P, P))
        H_pool[self._block_idx] = blocks.reshape(-1)
        H_pool[np.arange(P), np.arange(P)] -= inv_x**2
        grad = self.M.T @ grad_pool
        hess = self.M.T @ H_pool @ self.M
        if len(self.split):
            ys = y[self.split]
            grad += self.Ns.T @ (1.0 / ys)
            hess -= self.Ns.T @ (self.Ns / (ys**2)[:, None])
        if phase1:
            inv_s2 = 1.0 / slack**2
            cross_pool = (gg * inv_s2[:, None]).reshape(-1)
            cross = self.M.T @ cross_pool
            grad = np.append(grad, t - float((1.0 / slack).sum()))
            full = np.zeros((len(grad), len(grad)))
            full[:-1, :-1] = hess
            full[:-1, -1] = cross
            full[-1, :-1] = cross
            full[-1, -1] = -float(inv_s2.sum())
            hess = full
        return val, grad, hess


def _newton(func, w, opts: SolverOptions):
    """Damped Newton ascent on a concave barrier function; returns (w, iterations)."""
    for it in range(1, opts.max_iter + 1):
        val, grad, hess = func(w, True)
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-hess, grad, rcond=None)[0]
        lam2 = float(grad @ step)
        if lam2 / 2 <= opts.newton_tol:
            return w, it
        alpha = 1.0
        while True:
            cand = w + alpha * step
            v = func(cand, False)
            # near the optimum function values stop resolving the increase; trust the step
            if v > -math.inf and (lam2 / 2 < 1e-6 or v >= val + 0.01 * alpha * lam2):
                break
            alpha *= 0.5
            if alpha < 1e-14:
                return w, it
        w = cand
    return w, opts.max_iter


@dataclass
class _ComponentResult:
    delta: np.ndarray
    flows: np.ndarray
    improved: bool
    kkt: float = 0.0
    iterations: int = 0
    gains: np.ndarray = field(default=None)


def _solve_component(comp: _Component, opts: SolverOptions, start_delta=None) -> _ComponentResult:
    zero = np.zeros((comp.nc, 2))
    if comp.dim == 0 or not np.any(comp.scope_w > 0):
        return _ComponentResult(zero, zero.copy(), False)
    iterations = 0

    if start_delta is not None:
        z = comp.N.T @ start_delta.reshape(-1)
        if comp.barrier(z, 1.0, False, need_derivs=False) == -math.inf:
            raise ValueError("initial pools are not strictly feasible")
    else:
        # phase 1: find a point where every CFMM strictly gains
        z0 = np.zeros(comp.dim)
        _, delta0, _ = comp._state(z0)
        s0 = float(comp._gain(delta0, need_derivs=False).min()) - 1.0
        w = np.append(z0, s0)
        t = 1.0
        found = False
        for _ in range(opts.phase1_max_stages):
            w, its = _newton(lambda v, d: comp.barrier(v, t, True, d), w, opts)
            iterations += its
            if w[-1] > 0:
                found = True
                break
            if w[-1] + comp.m / t <= opts.phase1_tol:
                break
            t /= opts.mu_factor
        if not found:
            return _ComponentResult(zero, zero.copy(), False, iterations=iterations)
        z = w[:-1]

    t = float(comp.m)
    for _ in range(opts.max_stages + 1):
        z, its = _newton(lambda v, d: comp.barrier(v, t, False, d), z, opts)
        iterations += its
        if comp.m / t <= opts.tol:
            break
        t /= opts.mu_factor
    # duality gap plus the Newton decrement, both in objective units
    _, grad, hess = comp.barrier(z, t, False)
    try:
        lam2 = max(0.0, float(grad @ np.linalg.solve(-hess, grad)))
    except np.linalg.LinAlgError:
        lam2 = math.inf
    kkt = max((comp.m + lam2) / t, math.sqrt(lam2) / t)
    y, delta, _ = comp._state(z)
    flows = (comp.G @ y).reshape(comp.nc, 2)
    return _ComponentResult(delta, flows, True, kkt, iterations, comp._gain(delta, need_derivs=False))


def _polish(problem: RebalanceProblem, delta, flows, solved, pool_labels, reserves):
    """Put passive CFMMs exactly on their level sets and re-close conservation.

    Each passive CFMM's inflow is kept and its outflow recomputed from the exact
    trade map; the resulting conservation residual is absorbed by the first
    active pool holding that token, or pushed back into another passive inflow.
    """
    config = problem.config
    active = problem.active_mask
    gammas = problem.gammas
    n = len(config.cfmms)
    passives = [i for i in range(n) if solved[i] and not active[i]]
    for _ in range(20):
        for i in passives:
            c = config.cfmms[i]
            side = int(np.argmax(flows[i]))
            pay = flows[i, side]
            if not pay > 0:
                delta[i] = flows[i] = 0.0
                continue
            base = np.asarray(c.pools) + reserves[i]
            gain = gammas[i] * pay
            out = trade_output(c.function, side, base[side], base[1 - side], gain)
            delta[i, side], delta[i, 1 - side] = gain, -out
            flows[i, 1 - side] = -out
        worst = 0.0
        for lab in np.unique(pool_labels):
            members = [(int(p) // 2, int(p) % 2) for p in np.flatnonzero(pool_labels == lab)]
            if not any(solved[i] for i, _ in members):
                continue
            r = float(sum(flows[i, j] for i, j in members))
            scale = max(1.0, max(abs(config.cfmms[i].pools[j]) for i, j in members))
            worst = max(worst, abs(r) / scale)
            if r == 0.0:
                continue
            sink = next(((i, j) for i, j in members if active[i] and solved[i]), None)
            if sink is not None:
                flows[sink] -= r
                delta[sink] -= r
                continue
            sink = next(((i, j) for i, j in members if solved[i] and flows[i, j] > 0), None)
            if sink is not None:
                flows[sink] -= r
                delta[sink] -= gammas[sink[0]] * r
                continue
            # only passive outflows here: they must vanish at the optimum, so the
            # trades feeding them are barrier slack and get cancelled
            for i, j in members:
                if solved[i] and not active[i] and flows[i, j] < 0:
                    delta[i] = flows[i] = 0.0
        if worst <= 1e-15:
            break


def solve(problem: RebalanceProblem, opts: SolverOptions | None = None, initial_pools=None) -> RebalanceSolution:
    """Find the optimal rebalancing of ``problem``.

    Parameters
    ----------
    problem : RebalanceProblem
    opts : SolverOptions, optional
    initial_pools : array of shape (n, 2), optional
        Strictly feasible starting pools; skips the phase-1 search.  Not
        available when fees split passive pools into inflow/outflow variables.

    Returns
    -------
    RebalanceSolution
        ``status`` is ``"no_improvement"`` (with zero transfers) when no CFMM in
        scope can gain, i.e. the configuration is already Pareto efficient.

    Raises
    ------
    SolverDiverged
        If the KKT residual exceeds ``opts.tol`` after the last barrier stage.
    """
    opts = opts or SolverOptions()
    config = problem.config
    n = len(config.cfmms)
    pool_labels = _pool_components(n, problem.edges)
    delta = np.zeros((n, 2))
    flows = np.zeros((n, 2))
    reserves = np.zeros((n, 2))
    solved = np.zeros(n, dtype=bool)
    kkt, iterations = 0.0, 0
    if initial_pools is not None:
        initial_delta = np.asarray(initial_pools, dtype=float) - config.pools()
        if np.any(problem.gammas < 1.0):
            raise ValueError("initial_pools is not supported with fee-split passive pools")

    for members in _cfmm_components(n, pool_labels):
        comp = _Component(problem, members, pool_labels, opts)
        start = initial_delta[members] if initial_pools is not None else None
        res = _solve_component(comp, opts, start)
        iterations += res.iterations
        if not res.improved:
            continue
        delta[members] = res.delta
        flows[members] = res.flows
        reserves[members] = comp.base - comp.given
        solved[members] = True
        kkt = max(kkt, res.kkt)
        passive_gain = res.gains[~(comp.scope_w > 0)]
        if passive_gain.size and passive_gain.max() > 1e-6:
            log.warning("passive CFMMs in component %s gained %.3g before polishing", members, passive_gain.max())

    if problem.is_restricted and solved.any():
        _polish(problem, delta, flows, solved, pool_labels, reserves)

    scope = problem.active_mask
    initial = objective_value(config, problem.weights, scope)
    if not solved.any():
        return RebalanceSolution(problem, config, flows, Rebalancing({}), initial, initial, 0.0, iterations, "no_improvement")
    if kkt > opts.tol:
        raise SolverDiverged(f"KKT residual {kkt:.3g} above tolerance {opts.tol:.3g}")
    final = config.with_pools(config.pools() + delta)
    log.info("solved %d CFMMs in %d Newton iterations (kkt %.2g)", n, iterations, kkt)
    return RebalanceSolution(
        problem,
        final,
        flows,
        _canonical_deltas(problem, flows),
        objective_value(final, problem.weights, scope),
        initial,
        kkt,
        iterations,
        "optimal",
    )


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    residual: float
    detail: str = ""


@dataclass(frozen=True)
class VerificationReport:
    checks: tuple[Check, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def verify(
    problem: RebalanceProblem,
    solution: RebalanceSolution,
    tol: float = 1e-7,
    atol: float = CONSERVATION_ATOL,
    liquidity_rtol: float = 1e-10,
) -> VerificationReport:
    """Participant-side checks of a proposed final configuration.

    Each check reports its worst residual: liquidity non-reduction (relative),
    conservation of every token (absolute, after fees), positivity, passive
    liquidity equality for restricted problems, and arbitrage freedom of the
    final configuration.
    """
    config = problem.config
    final = solution.final_config
    checks = []
    before, after = config.pools(), final.pools()
    delta = after - before

    worst = 0.0
    for i, (c0, c1) in enumerate(zip(config.cfmms, final.cfmms)):
        if c0.is_oracle:
            a, b = c0.function.params
            drop = -(a * delta[i, 0] + b * delta[i, 1]) / (a + b) / max(1.0, np.abs(before[i]).max())
        else:
            k0 = liquidity(c0)
            drop = (k0 - liquidity(c1)) / k0
        worst = max(worst, drop)
    checks.append(Check("liquidity_non_reduction", worst <= liquidity_rtol, worst))

    flows = _flows_from_changes(delta, problem.gammas)
    labels = _pool_components(len(config.cfmms), problem.edges)
    flat = flows.reshape(-1)
    resid = max((abs(float(flat[labels == lab].sum())) for lab in np.unique(labels)), default=0.0)
    checks.append(Check("conservation", resid <= atol, resid))

    lows = [min(c.pools) for c in final.cfmms if not c.is_oracle]
    low = min(lows) if lows else math.inf
    checks.append(Check("positivity", low > 0, low))

    if problem.is_restricted:
        active = problem.active_mask
        worst = 0.0
        for i, (c0, c1) in enumerate(zip(config.cfmms, final.cfmms)):
            if active[i]:
                continue
            if c0.is_oracle:
                a, b = c0.function.params
                dev = abs(a * delta[i, 0] + b * delta[i, 1]) / (a + b) / max(1.0, np.abs(before[i]).max())
            else:
                dev = abs(liquidity(c1) / liquidity(c0) - 1.0)
            worst = max(worst, dev)
        checks.append(Check("passive_equality", worst <= tol, worst))

    gammas = problem.gammas if problem.use_fees else None
    cert = detect(final, tol, gammas=gammas)
    if isinstance(cert, Free):
        checks.append(Check("arbitrage_free", True, 0.0))
    else:
        checks.append(Check("arbitrage_free", False, cert.log_gain, f"cycle {list(cert.tokens)}"))
    return VerificationReport(tuple(checks))
