"""From a pricing density to a bond, risky assets and hedging portfolios."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import (EventTree, TreeError, as_values, backward_expectation,
                      change_of_measure, martingale_residual, multiplicative_decompose,
                      sibling_deviation)

ORTHOGONALITY_NOTE = (
    "basis martingales are conditionally orthogonal (zero predictable covariation); "
    "on a lattice all increments share jump times, so pathwise orthogonality of the "
    "quadratic covariation is not attempted")


@dataclass
class MartingaleBasis:
    n: int
    Y: np.ndarray        # (N, n) values, Y[0] = 1
    dY: np.ndarray       # (N, n) increments into each node
    xi: np.ndarray       # (N, n) orthonormal frame value at each child
    scale: np.ndarray    # (N, n) predictable jump scale
    active: np.ndarray   # (N, n) bool, frame component exists at the parent


@dataclass
class MarketRealization:
    qhat: EventTree
    qhat_density: np.ndarray
    beta: np.ndarray
    B: np.ndarray
    Y: np.ndarray
    S: np.ndarray
    H: np.ndarray            # (d, N, n)
    X: np.ndarray            # (d, N)
    Xtilde: np.ndarray       # (d, N)
    basis: MartingaleBasis | None = None
    clearing_mode: str = "mean"
    correction: float = 0.0
    pricing_identity_error: float = 0.0

    @property
    def n(self) -> int:
        return self.S.shape[1]


# --------------------------------------------------------------------------


def pricing_identity_error(tree, Q, qhat, beta, qhat_density, count=10, seed=0) -> float:
    """Worst relative gap of <Q, c> = E^qhat[sum c beta w] * Qhat_0 on random ``c``."""
    rng = np.random.default_rng(seed)
    wp = tree.prob * tree.node_weights
    wq = qhat.prob * tree.node_weights
    worst = 0.0
    for _ in range(count):
        c = rng.uniform(0.1, 2.0, tree.n_nodes)
        lhs = float(np.dot(wp, Q * c))
        rhs = float(np.dot(wq, c * beta)) * qhat_density[0]
        worst = max(worst, abs(lhs - rhs) / abs(lhs))
    return worst


def equivalent_measure(tree: EventTree, Q, count=10, seed=0):
    """Return ``(qhat_tree, beta, qhat_density, identity_error)``."""
    Q = as_values(Q)
    qd, beta = multiplicative_decompose(tree, Q)
    qd, beta = qd.values, beta.values
    qhat = change_of_measure(tree, qd / qd[0])
    err = pricing_identity_error(tree, Q, qhat, beta, qd, count, seed)
    return qhat, beta, qd, err


def multiplicity(tree: EventTree) -> int:
    return int(max(0, tree.n_children.max() - 1))


def _frame(p: np.ndarray) -> np.ndarray:
    """Orthonormal mean-zero frame (rows) under weights ``p``.

    Spanning set: centred indicators of the first ``m - 1`` children,
    orthonormalised by modified Gram-Schmidt in child order.
    """
    m = p.size
    out = np.zeros((m - 1, m))
    for j in range(m - 1):
        v = np.full(m, -p[j])
        v[j] += 1.0
        for i in range(j):
            v -= np.dot(p * v, out[i]) * out[i]
        out[j] = v / np.sqrt(np.dot(p, v * v))
    return out


def martingale_basis(qhat: EventTree) -> MartingaleBasis:
    n = multiplicity(qhat)
    N = qhat.n_nodes
    Y = np.ones((N, n))
    dY = np.zeros((N, n))
    xi = np.zeros((N, n))
    scale = np.zeros((N, n))
    active = np.zeros((N, n), dtype=bool)
    for u in qhat.inner:
        kids = qhat.children(u)
        m = len(kids)
        if m < 2:
            continue
        fr = _frame(qhat.p_cond[kids.start:kids.stop])
        for j in range(m - 1):
            xi[kids.start:kids.stop, j] = fr[j]
            active[kids.start:kids.stop, j] = True
    for k in range(1, qhat.K + 1):
        sl = qhat.level_slice(k)
        par = qhat.parent[sl]
        peak = np.zeros((N, n))
        for j in range(n):
            np.maximum.at(peak[:, j], par, np.abs(xi[sl, j]))
        s = np.where(active[sl], Y[par] / (2.0 * np.where(peak[par] > 0, peak[par], 1.0)), 0.0)
        scale[sl] = s
        dY[sl] = s * xi[sl]
        Y[sl] = Y[par] + dY[sl]
    return MartingaleBasis(n, Y, dY, xi, scale, active)


def represent(qhat: EventTree, basis: MartingaleBasis, M, tol: float = 1e-10):
    """Predictable integrands ``H`` with ``dM = sum_j H_j dY_j``; returns ``(H, residual)``."""
    m = as_values(M)
    res = martingale_residual(qhat, m)
    if res > tol * max(1.0, float(np.max(np.abs(m)))):
        raise TreeError(f"input is not a qhat-martingale (max residual {res:.3e})")
    N, n = basis.Y.shape
    dM = np.zeros(N)
    dM[1:] = m[1:] - m[qhat.parent[1:]]
    H = np.zeros((N, n))
    for j in range(n):
        proj = qhat.to_children(qhat._child_sum(qhat.p_cond * dM * basis.xi[:, j]))
        sc = basis.scale[:, j]
        H[:, j] = np.where(basis.active[:, j], proj / np.where(sc > 0, sc, 1.0), 0.0)
    recon = np.abs(dM - np.sum(H * basis.dY, axis=1))
    residual = float(recon.max()) / (1.0 + float(np.abs(dM).max()))
    return H, residual


def build_market(beta, basis: MartingaleBasis):
    beta = as_values(beta)
    if np.any(~(beta > 0)):
        raise ValueError("beta must be strictly positive")
    B = 1.0 / beta
    return B, B[:, None] * basis.Y


def simulate_wealth(tree: EventTree, B, S, H, c, e, strict: bool = True) -> np.ndarray:
    """Wealth under the self-financing dynamics with settlement at each node.

    The time-0 endowment/consumption settles immediately, so the wealth
    carried out of the root is ``(e_0 - c_0) w_0``.  With ``strict`` the bond
    and holdings must be predictable; otherwise they are used as given.
    """
    B, S, H = np.asarray(B, float), np.asarray(S, float), np.asarray(H, float)
    c, e = as_values(c), as_values(e)
    if strict:
        if sibling_deviation(tree, B) != 0.0:
            raise TreeError("bond must be predictable")
        if H.ndim == 2 and any(sibling_deviation(tree, H[:, j]) != 0.0
                               for j in range(H.shape[1])):
            raise TreeError("portfolio must be predictable")
    w = tree.node_weights
    X = np.zeros(tree.n_nodes)
    X[0] = (e[0] - c[0]) * w[0]
    for k in range(1, tree.K + 1):
        sl = tree.level_slice(k)
        u = tree.parent[sl]
        h = H[sl]
        X[sl] = (X[u] + np.sum(h * (S[sl] - S[u]), axis=1)
                 + (X[u] - np.sum(h * S[u], axis=1)) * (B[sl] - B[u]) / B[u]
                 + (e[sl] - c[sl]) * w[sl])
    return X


def _left_sum(H):
    acc = H[0].copy()
    for h in H[1:]:
        acc = acc + h
    return acc


def hedge_portfolios(tree: EventTree, qhat: EventTree, beta, basis: MartingaleBasis,
                     c, e, mode: str = "mean"):
    """Hedges of each agent's discounted net consumption, cleared across agents.

    Returns ``(H, Xtilde, correction)`` with ``H`` of shape ``(d, N, n)``.
    """
    beta = as_values(beta)
    c, e = np.asarray(c, float), np.asarray(e, float)
    d, N = c.shape
    w = tree.node_weights
    Xt = np.zeros((d, N))
    Ht = np.zeros((d, N, basis.n))
    for i in range(d):
        flow = beta * (c[i] - e[i]) * w
        cum = flow.copy()
        for v in range(1, N):
            cum[v] += cum[tree.parent[v]]
        Xt[i] = backward_expectation(tree, cum, qhat.p_cond)
        Ht[i], _ = represent(qhat, basis, Xt[i])
    correction = float(np.max(np.abs(Ht.mean(axis=0)))) if basis.n else 0.0
    if mode == "mean":
        H = Ht - Ht.mean(axis=0)
        if d > 1:
            H[-1] = -_left_sum(H[:-1])
        else:
            H[0] = 0.0
    elif mode == "indicator":
        tot = _left_sum(Ht)
        keep = np.abs(tot) <= 1e-10
        H = Ht * keep[None]
    else:
        raise ValueError(f"unknown clearing mode {mode!r}")
    return H, Xt, correction


def affordability_check(tree: EventTree, B, S, H, c, gamma, e, floor: float = -1e-9,
                        strict: bool = True) -> dict:
    """Gains bounded below, nonnegative terminal wealth, consumption within the cap."""
    H = np.asarray(H, float)
    S = np.asarray(S, float)
    gains = np.zeros(tree.n_nodes)
    dS = np.zeros_like(S)
    dS[1:] = S[1:] - S[tree.parent[1:]]
    g = np.sum(H * dS, axis=1)
    for v in range(1, tree.n_nodes):
        gains[v] = gains[tree.parent[v]] + g[v]
    X = simulate_wealth(tree, B, S, H, c, e, strict)
    leaf = tree.level_slice(tree.K)
    over = as_values(c) - as_values(gamma)
    bad_cap = np.nonzero(over > 0)[0]
    xk = X[leaf]
    return {
        "gains_lower_bound": float(max(0.0, -gains.min())),
        "terminal_wealth_min": float(xk.min()),
        "terminal_ok": bool(xk.min() >= floor),
        "terminal_node": None if xk.min() >= floor else tree.ids[leaf.start + int(np.argmin(xk))],
        "cap_excess": float(np.max(over)) if np.isfinite(np.max(over)) else 0.0,
        "cap_ok": bool(bad_cap.size == 0),
        "cap_node": None if bad_cap.size == 0 else tree.ids[int(bad_cap[0])],
        "pass": bool(xk.min() >= floor and bad_cap.size == 0),
        "wealth": X,
    }


def marketize(tree: EventTree, agents, solution, mode: str = "mean", seed: int = 0
              ) -> MarketRealization:
    """Full construction: measure change, basis, bond and stocks, hedges, wealth."""
    qhat, beta, qd, ident = equivalent_measure(tree, solution.Q, seed=seed)
    basis = martingale_basis(qhat)
    B, S = build_market(beta, basis)
    E = np.stack([a.e for a in agents])
    H, Xt, corr = hedge_portfolios(tree, qhat, beta, basis, solution.allocations, E, mode)
    X = np.stack([simulate_wealth(tree, B, S, H[i], solution.allocations[i], E[i])
                  for i in range(len(agents))])
    return MarketRealization(qhat=qhat, qhat_density=qd, beta=beta, B=B, Y=basis.Y, S=S,
                             H=H, X=X, Xtilde=Xt, basis=basis, clearing_mode=mode,
                             correction=corr, pricing_identity_error=ident)
