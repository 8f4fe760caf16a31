"""Negishi-weight equilibrium: nodewise clearing, budgets and the outer fixed point."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .lattice import EventTree
from .preferences import dual_value, utility_functional

log = logging.getLogger(__name__)

CLEAR_TOL = 1e-12
MAX_DOUBLINGS = 200


class InfeasibleNodeError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = list(trace)


@dataclass
class SolverOptions:
    tol: float = 1e-12
    max_iters: int = 2000
    step0: float = 1.0
    accelerate: bool = False
    cross_check: bool = False
    lam0: tuple | None = None


@dataclass
class EquilibriumSolution:
    weights: np.ndarray
    Q: np.ndarray
    allocations: np.ndarray          # (d, N)
    residuals: np.ndarray
    trace: list = field(default_factory=list)
    iterations: int = 0
    normalization: str = "kappa_mass_one"

    @property
    def d(self) -> int:
        return self.weights.size


# --------------------------------------------------------------------------
# nodewise clearing


def _stack(tree, agents):
    E = np.stack([a.e for a in agents])
    G = np.stack([a.gamma for a in agents])
    return E, G


def _demand(t, q, caps, lam, utilities):
    """``sum_i min(cap_i, I_i(t, lam_i q))`` for arrays of nodes."""
    tot = np.zeros_like(q)
    for i, u in enumerate(utilities):
        tot += np.minimum(caps[i], u.I(t, lam[i] * q))
    return tot


def _bisect_decreasing(fun, lo, hi, what="root"):
    """Roots of strictly decreasing ``fun`` (vectorised), bracket grown by doubling."""
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    for _ in range(MAX_DOUBLINGS):
        bad = ~(fun(lo) > 0)
        if not bad.any():
            break
        lo[bad] *= 0.5
    else:
        raise NumericalError(f"{what}: lower bracket not found after {MAX_DOUBLINGS} halvings")
    for _ in range(MAX_DOUBLINGS):
        bad = ~(fun(hi) < 0)
        if not bad.any():
            break
        hi[bad] *= 2.0
    else:
        raise NumericalError(f"{what}: upper bracket not found after {MAX_DOUBLINGS} doublings")
    hi = np.maximum(hi, lo)
    for _ in range(400):
        mid = np.sqrt(lo) * np.sqrt(hi)
        mid = np.where((mid <= lo) | (mid >= hi), 0.5 * (lo + hi), mid)
        stuck = (mid <= lo) | (mid >= hi)
        if stuck.all():
            break
        pos = fun(mid) > 0
        lo = np.where(pos & ~stuck, mid, lo)
        hi = np.where(~pos & ~stuck, mid, hi)
    flo, fhi = np.abs(fun(lo)), np.abs(fun(hi))
    return np.where(flo <= fhi, lo, hi)


def clearing_prices(t, e_agg, caps, lam, utilities) -> np.ndarray:
    """Solve ``sum_i min(cap_i, I_i(t, lam_i q)) = e_agg`` at every node."""
    t = np.asarray(t, dtype=float)
    e_agg = np.asarray(e_agg, dtype=float)
    caps = np.asarray(caps, dtype=float).reshape(len(utilities), -1)
    lam = np.asarray(lam, dtype=float)
    infeasible = np.nonzero(~(caps.sum(axis=0) > e_agg))[0]
    if infeasible.size:
        raise InfeasibleNodeError(
            f"node {int(infeasible[0])}: total cap {caps[:, infeasible[0]].sum()!r} "
            f"does not exceed aggregate endowment {e_agg[infeasible[0]]!r}")
    share = e_agg / len(utilities)
    guesses = np.stack([u.U_x(t, share) / lam[i] for i, u in enumerate(utilities)])
    lo, hi = guesses.min(axis=0), guesses.max(axis=0)
    fun = lambda q: _demand(t, q, caps, lam, utilities) - e_agg
    return _bisect_decreasing(fun, lo, hi, "clearing price")


def clearing_price(t, e_agg, caps, lam, utilities) -> float:
    caps = np.asarray(caps, dtype=float).reshape(-1, 1)
    return float(clearing_prices(np.array([t]), np.array([e_agg]), caps, lam, utilities)[0])


def pricing_density(tree: EventTree, agents, lam) -> np.ndarray:
    E, G = _stack(tree, agents)
    return clearing_prices(tree.node_times, E.sum(axis=0), G, lam,
                           [a.utility for a in agents])


def allocations(tree: EventTree, agents, lam, Q) -> np.ndarray:
    t = tree.node_times
    return np.stack([np.minimum(a.gamma, a.utility.I(t, lam[i] * Q))
                     for i, a in enumerate(agents)])


def _evaluate(tree, agents, lam):
    Q = pricing_density(tree, agents, lam)
    c = allocations(tree, agents, lam, Q)
    wq = tree.prob * tree.node_weights * Q
    E = np.stack([a.e for a in agents])
    r = (E - c) @ wq
    s = E @ wq
    return Q, c, r, s


def budget_residuals(tree: EventTree, agents, lam) -> np.ndarray:
    """``r_i = E int Q (e^i - c^i) dkappa`` at the weights ``lam``."""
    return _evaluate(tree, agents, np.asarray(lam, dtype=float))[2]


def coalition_cross_check(tree: EventTree, agents, lam, Q) -> float:
    """``max |Q - min_b J^b(t, e_t - Gamma^b_t)|`` over nodes and coalitions."""
    d = len(agents)
    if d > 12:
        raise ValueError(f"coalition cross-check enumerates 2^d - 1 = {2 ** d - 1} "
                         "coalitions; skip it for d > 12")
    E, G = _stack(tree, agents)
    e = E.sum(axis=0)
    t = tree.node_times
    best = np.full(tree.n_nodes, np.inf)
    for b in itertools.product((0, 1), repeat=d):
        if not any(b):
            continue
        members = [i for i in range(d) if b[i]]
        others = [i for i in range(d) if not b[i]]
        gb = G[others].sum(axis=0) if others else np.zeros(tree.n_nodes)
        x = e - gb
        live = x > 0
        if not live.any():
            continue
        tl, xl = t[live], x[live]

        def fun(y, tl=tl, xl=xl):
            return sum(agents[i].utility.I(tl, lam[i] * y) for i in members) - xl

        guess = np.ones(xl.size)
        jb = np.full(tree.n_nodes, np.inf)
        jb[live] = _bisect_decreasing(fun, guess, guess, "coalition inverse")
        best = np.minimum(best, jb)
    return float(np.max(np.abs(np.asarray(Q) - best)))


# --------------------------------------------------------------------------
# outer fixed point


def solve(tree: EventTree, agents, opts: SolverOptions | None = None) -> EquilibriumSolution:
    """Find Negishi weights making every budget bind, then normalise ``E int Q dkappa = 1``."""
    opts = opts or SolverOptions()
    d = len(agents)
    if d < 1:
        raise ValueError("need at least one agent")
    lam = np.ones(d) if opts.lam0 is None else np.asarray(opts.lam0, dtype=float).copy()
    if np.any(~(lam > 0)):
        raise ValueError("initial weights must be positive")
    lam = lam / lam[0]

    Q, c, r, s = _evaluate(tree, agents, lam)
    err = _rel_err(r, s)
    trace = [err]
    eta = float(opts.step0)
    it = 0
    while err > opts.tol:
        if it >= opts.max_iters:
            raise ConvergenceError(
                f"no convergence after {it} iterations (residual {err:.3e})", trace)
        it += 1
        step = None
        if opts.accelerate and d > 1:
            step = _newton_step(tree, agents, lam, r / s, err)
        if step is None:
            while True:
                trial = lam * np.exp(-eta * r / s)
                trial = trial / trial[0]
                Qt, ct, rt, st = _evaluate(tree, agents, trial)
                et = _rel_err(rt, st)
                if et < err or eta < 1e-12:
                    break
                eta *= 0.5
            step = (trial, Qt, ct, rt, st, et)
        lam, Q, c, r, s, err = step
        trace.append(err)
        log.debug("iter %d residual %.3e eta %.3g", it, err, eta)

    mass = tree.kappa_integral(Q)
    return EquilibriumSolution(weights=lam * mass, Q=Q / mass, allocations=c,
                               residuals=r / mass, trace=trace, iterations=it)


def _rel_err(r, s):
    return float(np.max(np.abs(r)) / np.sum(s))


def _newton_step(tree, agents, lam, g, err):
    """Quasi-Newton step on the free log-weights with a finite-difference Jacobian."""
    d = lam.size
    h = 1e-7
    J = np.empty((d - 1, d - 1))
    for j in range(1, d):
        bumped = lam.copy()
        bumped[j] *= np.exp(h)
        _, _, rb, sb = _evaluate(tree, agents, bumped)
        J[:, j - 1] = (rb / sb - g)[1:] / h
    try:
        dx = np.linalg.solve(J, -g[1:])
    except np.linalg.LinAlgError:
        return None
    t = 1.0
    for _ in range(20):
        trial = lam.copy()
        trial[1:] *= np.exp(t * dx)
        Qt, ct, rt, st = _evaluate(tree, agents, trial)
        et = _rel_err(rt, st)
        if et < err:
            return trial, Qt, ct, rt, st, et
        t *= 0.5
    return None


# --------------------------------------------------------------------------
# certificates


def kkt_certificate(tree: EventTree, agents, sol: EquilibriumSolution, tol: float = 1e-10) -> dict:
    """First-order conditions, binding budgets and the duality gap per agent."""
    t = tree.node_times
    wts = tree.prob * tree.node_weights
    agents_out = []
    for i, a in enumerate(agents):
        u, lam = a.utility, sol.weights[i]
        c, g = sol.allocations[i], a.gamma
        y = lam * sol.Q
        at_cap = c >= g
        free = ~at_cap
        foc = np.abs(u.U_x(t[free], c[free]) - y[free]) / y[free]
        cap_gap = np.maximum(0.0, y[at_cap] - u.U_x(t[at_cap], g[at_cap]))
        m = np.minimum(g, np.max(c) + 1.0)
        primal = utility_functional(tree, u, c)
        dual = lam * float(np.dot(wts, sol.Q * a.e)) + float(np.dot(wts, dual_value(u, t, y, m)))
        scale = float(np.dot(sol.Q * wts, sum(b.e for b in agents)))
        agents_out.append({
            "agent": i,
            "foc_residual": float(foc.max()) if foc.size else 0.0,
            "cap_violation": float(cap_gap.max()) if cap_gap.size else 0.0,
            "nodes_at_cap": int(at_cap.sum()),
            "budget_residual": float(abs(sol.residuals[i]) / scale),
            "primal": primal,
            "dual": dual,
            "dual_gap": abs(primal - dual),
        })
    ok = all(x["foc_residual"] <= 1e-9 and x["cap_violation"] <= 1e-9
             and x["budget_residual"] <= tol for x in agents_out)
    return {"agents": agents_out, "pass": ok}
