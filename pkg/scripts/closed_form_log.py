"""Log-utility pair with common impatience: solver shares against the closed form.

With I(t, y) = exp(-beta t) / y and no caps, clearing gives consumption
shares that are constant across nodes, and the binding budgets pin them to

    alpha_i = sum_k w_k exp(-beta t_k) E[e^i_k / e_k] / sum_k w_k exp(-beta t_k).
"""
import argparse

import numpy as np

from equilibrage.negishi import solve
from equilibrage.scenario import Scenario


def log_pair(beta: float, seed: int = 0, K: int = 4) -> Scenario:
    agents = [{"utility": {"family": "log", "beta": beta},
               "endowment": {"generator": "shock", "e0": e0, "sigma": 0.3,
                             "lo": 0.5, "hi": 2.0, "seed": seed * 10 + i},
               "cap": {"kind": "none"}}
              for i, e0 in enumerate((1.5, 0.7))]
    return Scenario({"generator": "uniform", "K": K, "branching": 2, "seed": seed},
                    agents, seed=seed, name=f"log-pair-beta-{beta:g}")


def closed_form_shares(tree, endowments, beta: float) -> np.ndarray:
    """Oracle written against level sums only; it does not touch the solver."""
    E = np.asarray(endowments, dtype=float)
    e = E.sum(axis=0)
    times = tree.grid.times
    w = tree.grid.kappa_weights
    disc = w * np.exp(-beta * times)
    out = []
    for ei in E:
        level_means = [float(np.sum(tree.prob[tree.level == k] * (ei / e)[tree.level == k]))
                       for k in range(tree.K + 1)]
        out.append(float(np.dot(disc, level_means) / disc.sum()))
    return np.array(out)


def compare(beta: float, seed: int = 0):
    tree, agents = log_pair(beta, seed).build()
    sol = solve(tree, agents)
    e = sum(a.e for a in agents)
    shares = sol.allocations / e
    alpha = closed_form_shares(tree, [a.e for a in agents], beta)
    spread = float(np.max(shares.max(axis=1) - shares.min(axis=1)))
    rel = float(np.max(np.abs(shares.mean(axis=1) - alpha) / alpha))
    return alpha, shares, spread, rel


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for beta in (0.0, 0.1):
        alpha, _, spread, rel = compare(beta, args.seed)
        print(f"beta {beta:4.2f}  alpha {alpha}  share spread {spread:.2e}  rel err {rel:.2e}")


if __name__ == "__main__":
    main()
