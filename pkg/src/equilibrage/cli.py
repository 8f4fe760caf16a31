"""Command line: regularity | solve | certify | demo | all.

Exit codes: 0 every executed check passed, 1 certificate (or regularity)
failure, 2 solver non-convergence, 3 input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import io as art
from .lattice import TreeError
from .marketize import marketize
from .negishi import ConvergenceError, InfeasibleNodeError, NumericalError, solve
from .preferences import regularity_report
from .scenario import ScenarioError, demo_scenarios, parse_scenario, write_scenario
from .verify import certify

EXIT_OK, EXIT_CERT, EXIT_SOLVER, EXIT_INPUT = 0, 1, 2, 3

log = logging.getLogger("equilibrage")


def _load(args):
    sc = parse_scenario(args.scenario)
    if args.seed is not None:
        sc = sc.with_seed(args.seed)
    solver = sc.solver
    if args.tol is not None:
        solver = replace(solver, tol=args.tol)
    if args.max_iters is not None:
        solver = replace(solver, max_iters=args.max_iters)
    if args.cross_check:
        solver = replace(solver, cross_check=True)
    sc.solver = solver
    if args.deviations is not None:
        sc.output.deviations = args.deviations
    tree, agents = sc.build()
    return sc, tree, agents


def _regularity(sc, tree, agents, out: Path) -> int:
    rep = regularity_report(tree, agents)
    art.write_json(out / "regularity.json", rep)
    for a in rep["agents"]:
        bad = [it["check"] for it in a["items"] if not it["pass"]]
        if bad:
            log.warning("agent %d regularity failures: %s", a["agent"], ", ".join(bad))
    return EXIT_OK if rep["pass"] else EXIT_CERT


def _solve(sc, tree, agents, out: Path):
    try:
        sol = solve(tree, agents, sc.solver)
    except ConvergenceError as exc:
        art.write_json(out / "trace.json", {"error": str(exc), "residual_trace": exc.trace})
        log.error("%s", exc)
        return None, None, EXIT_SOLVER
    except NumericalError as exc:
        art.write_json(out / "trace.json", {"error": str(exc), "residual_trace": []})
        log.error("%s", exc)
        return None, None, EXIT_SOLVER
    market = marketize(tree, agents, sol, sc.output.clearing_mode, seed=sc.seed)
    art.write_json(out / "equilibrium.json", art.solution_to_dict(tree, sol, sc.seed))
    art.write_json(out / "tree.json", art.tree_to_dict(tree))
    art.write_json(out / "market.json", art.market_summary(market))
    (out / "market.csv").write_text(art.market_to_csv(tree, market))
    if sc.output.plots:
        (out / "plots").mkdir(exist_ok=True)
        for name, text in art.plot_files(tree, sol, market).items():
            (out / name).write_text(text)
    return sol, market, EXIT_OK


def _certify(sc, tree, agents, out: Path, sol=None, market=None) -> int:
    X_dump = None
    if sol is None:
        try:
            sol = art.solution_from_dict(json.loads((out / "equilibrium.json").read_text()))
            market = art.market_from_csv(tree, (out / "market.csv").read_text(), len(agents))
        except (OSError, ValueError, KeyError) as exc:
            raise ScenarioError("missing", f"cannot reload solve artifacts from {out}: {exc}")
        X_dump = market.X
    cert = certify(tree, agents, sol, market, deviations=sc.output.deviations, seed=sc.seed,
                   cross_check=sc.solver.cross_check, X_dump=X_dump)
    art.write_json(out / "certificate.json", cert.as_dict())
    for c in cert.checks:
        log.info("%-30s residual %.3e tol %.1e %s", c.check, c.residual, c.tol,
                 "pass" if c.passed else "FAIL")
    if not cert.passed:
        log.error("certificate failed: %s", ", ".join(cert.failed()))
    return EXIT_OK if cert.passed else EXIT_CERT


def run(command: str, args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        log.error("cannot create output directory %s: %s", out, exc)
        return EXIT_INPUT
    if command == "demo":
        for name, sc in demo_scenarios().items():
            write_scenario(sc, out / f"demo_{name}.json")
        art.write_manifest(out)
        return EXIT_OK

    try:
        sc, tree, agents = _load(args)
        if command == "regularity":
            code = _regularity(sc, tree, agents, out)
        elif command == "solve":
            code = _solve(sc, tree, agents, out)[2]
        elif command == "certify":
            code = _certify(sc, tree, agents, out)
        elif command == "all":
            reg = _regularity(sc, tree, agents, out)
            sol, market, code = _solve(sc, tree, agents, out)
            if code == EXIT_OK:
                code = max(reg, _certify(sc, tree, agents, out, sol, market))
        else:
            raise ValueError(f"unknown command {command!r}")
    except ScenarioError as exc:
        for e in exc.errors:
            log.error("%s: %s", exc.kind, e)
        return EXIT_INPUT
    except (TreeError, InfeasibleNodeError) as exc:
        log.error("input: %s", exc)
        return EXIT_INPUT
    except OSError as exc:
        log.error("cannot write artifacts: %s", exc)
        return EXIT_INPUT
    art.write_manifest(out)
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="equilibrage",
                                 description="Equilibria on finite event trees.")
    ap.add_argument("command", choices=["regularity", "solve", "certify", "demo", "all"])
    ap.add_argument("--scenario", type=str, help="scenario JSON file")
    ap.add_argument("--out", type=str, default="out", help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    ap.add_argument("--tol", type=float, default=None, help="solver tolerance")
    ap.add_argument("--max-iters", type=int, default=None, help="solver iteration cap")
    ap.add_argument("--cross-check", action="store_true",
                    help="also check the coalition formula for the density")
    ap.add_argument("--deviations", type=int, default=None,
                    help="random affordable deviations per agent")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.command != "demo" and not args.scenario:
        log.error("--scenario is required for %s", args.command)
        return EXIT_INPUT
    return run(args.command, args)


if __name__ == "__main__":
    sys.exit(main())
