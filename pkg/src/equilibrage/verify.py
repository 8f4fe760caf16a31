"""Certification of a synthesized equilibrium market, with independent oracles."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .lattice import EventTree, martingale_residual, sibling_deviation
from .marketize import (ORTHOGONALITY_NOTE, MarketRealization, affordability_check,
                        pricing_identity_error, simulate_wealth)
from .preferences import AgentSpec, utility_functional


@dataclass
class Check:
    check: str
    paper_anchor: str
    residual: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.residual) and self.residual <= self.tol)

    def as_dict(self) -> dict:
        return {"check": self.check, "paper_anchor": self.paper_anchor,
                "residual": float(self.residual), "tol": float(self.tol), "pass": self.passed}


@dataclass
class Certificate:
    checks: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name) -> Check:
        for c in self.checks:
            if c.check == name:
                return c
        raise KeyError(name)

    def failed(self) -> list:
        return [c.check for c in self.checks if not c.passed]

    def as_dict(self) -> dict:
        return {"verdict": self.passed, "checks": [c.as_dict() for c in self.checks],
                "notes": list(self.notes)}


@dataclass
class Tolerances:
    clearing: float = 1e-10
    portfolio: float = 0.0
    budget: float = 1e-9
    kkt: float = 1e-8
    dual_gap: float = 1e-7
    hedge_initial: float = 1e-9
    hedge_correction: float = 1e-10
    terminal_wealth: float = 1e-8
    wealth_floor: float = 1e-9
    martingale_assets: float = 1e-11
    unique_measure: float = 1e-10
    density_recon: float = 1e-12
    density_martingale: float = 1e-13
    pricing_identity: float = 1e-11
    best_response: float = 1e-6
    deviation: float = 1e-9
    coalition: float = 1e-8
    wealth_dump: float = 1e-9


# --------------------------------------------------------------------------
# independent oracles


def oracle_best_response(tree: EventTree, agent: AgentSpec, Q, tol: float = 1e-10):
    """Maximise the agent's utility on its budget set at prices ``Q``.

    Scalar bisection on the multiplier ``mu`` of the budget
    ``<Q, min(Gamma, I(mu Q))> = <Q, e>``; shares no code with the solver.
    """
    Q = np.asarray(Q, dtype=float)
    t = tree.node_times
    wq = tree.prob * tree.node_weights * Q
    g = agent.gamma
    wealth = float(np.dot(wq, agent.e))
    u = agent.utility

    def spend(mu):
        return float(np.dot(wq, np.minimum(g, u.I(t, mu * Q)))) - wealth

    lo, hi = 1.0, 1.0
    n = 0
    while spend(lo) <= 0:
        lo *= 0.5
        n += 1
        if n > 2000:
            raise RuntimeError("budget cannot be exhausted at any multiplier")
    n = 0
    while spend(hi) >= 0:
        hi *= 2.0
        n += 1
        if n > 2000:
            raise RuntimeError("budget infeasible at every multiplier")
    for _ in range(300):
        mid = math.sqrt(lo) * math.sqrt(hi)
        if mid <= lo or mid >= hi:
            break
        if spend(mid) > 0:
            lo = mid
        else:
            hi = mid
    mu = lo if abs(spend(lo)) <= abs(spend(hi)) else hi
    c = np.minimum(g, u.I(t, mu * Q))
    gap = abs(spend(mu))
    if gap > tol * max(1.0, wealth):
        raise RuntimeError(f"oracle budget residual {gap:.3e} above tolerance")
    return c


def random_deviation(tree, market_B, market_S, agent, c_eq, H_eq, rng, sigma=0.2):
    """One affordable deviation that exactly exhausts the budget.

    Consumption before ``T`` and holdings are randomly perturbed; terminal
    consumption absorbs the resulting wealth so that ``X_T = 0``.
    """
    N = tree.n_nodes
    leaf = tree.level_slice(tree.K)
    for _ in range(40):
        c = np.minimum(agent.gamma, c_eq * np.exp(sigma * rng.standard_normal(N)))
        # holdings into a node are chosen at its parent, so siblings share them
        noise = sigma * rng.standard_normal(H_eq.shape)
        H = H_eq + noise[np.r_[0, tree.parent[1:]]]
        c[leaf] = 0.0
        e = agent.e.copy()
        X = simulate_wealth(tree, market_B, market_S, H, c, e, False)
        c[leaf] = X[leaf] / tree.node_weights[leaf]
        if np.all(c[leaf] > 0):
            return H, c
        sigma *= 0.5
    return H_eq.copy(), c_eq.copy()


def deviation_test(tree: EventTree, market: MarketRealization, agent: AgentSpec, i: int,
                   c_eq, count: int = 100, seed: int = 0) -> dict:
    """Seeded affordable deviations never beat the equilibrium utility."""
    rng = np.random.default_rng(seed)
    base = utility_functional(tree, agent.utility, c_eq)
    gaps = []
    for _ in range(count):
        H, c = random_deviation(tree, market.B, market.S, agent, c_eq, market.H[i], rng)
        gaps.append(utility_functional(tree, agent.utility, c) - base)
    gaps = np.asarray(gaps)
    return {"agent": i, "count": count, "max_gap": float(gaps.max()) if count else -math.inf,
            "gaps": gaps}


def uniqueness_check(tree: EventTree, market: MarketRealization, tol: float = 1e-10) -> dict:
    """Solve for the one-step probabilities making every ``S_j / B`` a martingale."""
    disc = market.S / market.B[:, None]
    worst, bad_node, rank_fail = 0.0, None, None
    for u in tree.inner:
        kids = tree.children(u)
        m = len(kids)
        if m == 1:
            continue
        inc = disc[kids.start:kids.stop] - disc[u]           # (m, n)
        A = np.vstack([np.ones(m), inc.T])
        b = np.zeros(A.shape[0])
        b[0] = 1.0
        rank = np.linalg.matrix_rank(A, tol=1e-12 * max(1.0, np.abs(A).max()))
        if rank < m:
            rank_fail = rank_fail or (tree.ids[u], int(rank), m)
            worst = math.inf
            continue
        pi, *_ = np.linalg.lstsq(A, b, rcond=None)
        err = max(float(np.max(np.abs(A @ pi - b))),
                  float(np.max(np.abs(pi - market.qhat.p_cond[kids.start:kids.stop]))))
        if pi.min() <= 0:
            err = math.inf
        if err > worst:
            worst, bad_node = err, tree.ids[u]
    return {"max_deviation": worst, "node": bad_node, "rank_failure": rank_fail,
            "pass": bool(worst <= tol)}


# --------------------------------------------------------------------------


def certify(tree: EventTree, agents, solution, market: MarketRealization,
            tol: Tolerances | None = None, deviations: int = 0, seed: int = 0,
            cross_check: bool = False, X_dump=None, workers: int | None = None) -> Certificate:
    """Run every equilibrium check and collect the results.

    Per-agent deviation tests run on ``workers`` threads (default from
    ``EQUILIBRAGE_THREADS``, else 1); results are reduced in agent order.
    """
    from .negishi import coalition_cross_check, kkt_certificate

    tol = tol or Tolerances()
    cert = Certificate(notes=[ORTHOGONALITY_NOTE])
    add = lambda *a: cert.checks.append(Check(*a))
    E = np.stack([a.e for a in agents])
    e_agg = E.sum(axis=0)
    c = np.asarray(solution.allocations)
    Q = np.asarray(solution.Q)
    d = len(agents)
    wq = tree.prob * tree.node_weights * Q
    scale = float(np.dot(wq, e_agg))

    add("consumption_clearing", "equilibrium market: aggregate consumption equals endowment",
        float(np.max(np.abs(c.sum(axis=0) - e_agg) / e_agg)), tol.clearing)
    Hsum = market.H[0].copy()
    for h in market.H[1:]:
        Hsum = Hsum + h
    add("portfolio_clearing", "equilibrium market: portfolios sum to zero",
        float(np.max(np.abs(Hsum))) if Hsum.size else 0.0, tol.portfolio)
    add("hedge_correction", "portfolio clearing adjustment is negligible before it is applied",
        market.correction, tol.hedge_correction)
    r = (E - c) @ wq
    add("budget", "abstract equilibrium: budgets bind at the pricing functional",
        float(np.max(np.abs(r))) / scale, tol.budget)

    kkt = kkt_certificate(tree, agents, solution)
    add("kkt_first_order", "optimal consumption has the capped inverse-marginal form",
        max(max(a["foc_residual"], a["cap_violation"]) for a in kkt["agents"]), tol.kkt)
    add("dual_gap", "convex duality: primal utility equals the dual value",
        max(a["dual_gap"] for a in kkt["agents"]), tol.dual_gap)

    qd0 = market.qhat_density[0]
    add("hedge_initial_value", "hedged discounted net consumption starts at zero",
        float(np.max(np.abs(market.Xtilde[:, 0]))) * qd0 / scale, tol.hedge_initial)

    leaf = tree.level_slice(tree.K)
    pred = max([sibling_deviation(tree, market.B)]
               + [sibling_deviation(tree, market.H[i][:, j]) for i in range(d)
                  for j in range(market.n)])
    add("strategies_predictable", "bond and holdings are predictable", pred, 0.0)
    X = np.stack([simulate_wealth(tree, market.B, market.S, market.H[i], c[i], E[i], False)
                  for i in range(d)])
    add("terminal_wealth", "affordable strategy: terminal wealth is zero",
        float(np.max(np.abs(X[:, leaf]))), tol.terminal_wealth)
    afford = [affordability_check(tree, market.B, market.S, market.H[i], c[i],
                                  agents[i].gamma, E[i], -tol.wealth_floor, False)
              for i in range(d)]
    add("wealth_nonnegative", "affordable strategy: terminal wealth nonnegative",
        max(0.0, -min(a["terminal_wealth_min"] for a in afford)), tol.wealth_floor)
    add("cap_respected", "affordable strategy: consumption within the withdrawal cap",
        max(0.0, max(a["cap_excess"] for a in afford)), 0.0)
    add("gains_bounded_below", "affordable strategy: gains bounded below",
        max(a["gains_lower_bound"] for a in afford), math.inf)
    if X_dump is not None:
        add("wealth_dump_consistency", "wealth dynamics of the self-financing portfolio",
            float(np.max(np.abs(np.asarray(X_dump) - X))), tol.wealth_dump)

    disc = market.S / market.B[:, None]
    add("discounted_assets_martingale", "arbitrage free: S/B are martingales under qhat",
        martingale_residual(market.qhat, disc) if disc.size else 0.0, tol.martingale_assets)
    uq = uniqueness_check(tree, market, tol.unique_measure)
    add("unique_martingale_measure", "arbitrage free: the martingale measure is unique",
        uq["max_deviation"], tol.unique_measure)
    add("consumption_bounded", "optimal consumption uniformly bounded above",
        max(0.0, float(c.max() - e_agg.max())) / e_agg.max(), tol.clearing)

    qd, beta = market.qhat_density, market.beta
    add("density_reconstruction", "multiplicative decomposition Q = Qhat beta",
        float(np.max(np.abs(Q - qd * beta) / Q)), tol.density_recon)
    add("density_martingale", "multiplicative decomposition: Qhat is a martingale",
        martingale_residual(tree, qd), tol.density_martingale)
    add("beta_predictable", "multiplicative decomposition: beta is predictable",
        sibling_deviation(tree, beta), 0.0)
    add("pricing_identity", "pricing functional as a discounted qhat-expectation",
        pricing_identity_error(tree, Q, market.qhat, beta, qd, 10, seed), tol.pricing_identity)

    br = max(float(np.max(np.abs(oracle_best_response(tree, a, Q) - c[i])))
             for i, a in enumerate(agents))
    add("best_response_oracle", "each allocation maximises utility on its budget set",
        br, tol.best_response)
    if deviations > 0:
        workers = workers or int(os.environ.get("EQUILIBRAGE_THREADS", "1") or 1)
        job = lambda i: deviation_test(tree, market, agents[i], i, c[i], deviations, seed + i)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                reports = list(pool.map(job, range(d)))
        else:
            reports = [job(i) for i in range(d)]
        gap = max(r["max_gap"] for r in reports)
        # signed: negative when every deviation is strictly worse
        add("deviation_test", "no affordable strategy improves utility", gap, tol.deviation)
    if cross_check and d <= 12:
        add("coalition_formula", "pricing density as a minimum over coalitions",
            coalition_cross_check(tree, agents, solution.weights, Q), tol.coalition)
    return cert
