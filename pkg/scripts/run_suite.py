"""Certify a batch of seeded random scenarios and print one line per scenario."""
import argparse
import time

from equilibrage.marketize import marketize
from equilibrage.negishi import solve
from equilibrage.scenario import random_scenario
from equilibrage.verify import certify


def run(seed, deviations, cross_check):
    sc = random_scenario(seed)
    tree, agents = sc.build()
    sol = solve(tree, agents, sc.solver)
    market = marketize(tree, agents, sol, seed=seed)
    cert = certify(tree, agents, sol, market, deviations=deviations, seed=seed,
                   cross_check=cross_check)
    return sc, tree, sol, cert


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=50)
    ap.add_argument("--start", type=int, default=0)
    ap.add_argument("--deviations", type=int, default=100)
    ap.add_argument("--no-cross-check", action="store_true")
    args = ap.parse_args()
    t0 = time.perf_counter()
    fails = 0
    for seed in range(args.start, args.start + args.count):
        t1 = time.perf_counter()
        sc, tree, sol, cert = run(seed, args.deviations, not args.no_cross_check)
        fails += not cert.passed
        print(f"seed {seed:4d} d={sc.d} K={tree.K} nodes={tree.n_nodes:4d} "
              f"iters={sol.iterations:4d} {time.perf_counter() - t1:6.3f}s "
              f"{'pass' if cert.passed else 'FAIL ' + ','.join(cert.failed())}")
    print(f"{args.count - fails}/{args.count} passed in {time.perf_counter() - t0:.2f}s")


if __name__ == "__main__":
    main()
