"""Acceptance criteria, each at its stated tolerance; one report line per criterion."""
import time

import numpy as np
import pytest

from equilibrage.cli import EXIT_OK, main
from equilibrage.lattice import build_tree, martingale_residual
from equilibrage.marketize import marketize
from equilibrage.negishi import solve
from equilibrage.scenario import random_scenario, write_scenario
from equilibrage.semicalc import (AnalyticFunction, GridFunction, convexity_split,
                                  min_stability, semifun_decompose)
from equilibrage.verify import certify

from closed_form_log import closed_form_shares, log_pair
from convergence_order import orders

SUITE_SEEDS = range(60)
DEVIATIONS = 100


@pytest.fixture(scope="module")
def suite():
    t0 = time.perf_counter()
    runs = []
    for seed in SUITE_SEEDS:
        sc = random_scenario(seed)
        tree, agents = sc.build()
        sol = solve(tree, agents, sc.solver)
        market = marketize(tree, agents, sol, seed=seed)
        cert = certify(tree, agents, sol, market, deviations=DEVIATIONS, seed=seed,
                       cross_check=len(agents) <= 4)
        runs.append((sc, tree, agents, sol, market, cert))
    return runs, time.perf_counter() - t0


def worst(runs, check):
    return max(r[5][check].residual for r in runs)


# 1 ------------------------------------------------------------------------

@pytest.mark.parametrize("beta", [0.0, 0.1])
def test_criterion_1_closed_form_log_pair(report, beta):
    t0 = time.perf_counter()
    sc = log_pair(beta, seed=0)
    tree, agents = sc.build()
    sol = solve(tree, agents)
    elapsed = time.perf_counter() - t0
    e = sum(a.e for a in agents)
    shares = sol.allocations / e
    alpha = closed_form_shares(tree, [a.e for a in agents], beta)
    spread = float(np.max(shares.max(axis=1) - shares.min(axis=1)))
    rel = float(np.max(np.abs(shares - alpha[:, None]) / alpha[:, None]))
    # with E int Q dkappa = 1 the weights follow from the shares alone
    lam = tree.kappa_integral(np.exp(-beta * tree.node_times) / e) / alpha
    lam_rel = float(np.max(np.abs(sol.weights - lam) / lam))
    cert = certify(tree, agents, sol, marketize(tree, agents, sol))
    ok = spread <= 1e-8 and rel <= 1e-8 and elapsed < 1.0 and cert.passed
    report(f"1 closed-form log pair (beta={beta:g})", ok,
           f"share spread {spread:.1e}, rel err {rel:.1e}, closed-form weights rel err "
           f"{lam_rel:.1e}, certificate {'pass' if cert.passed else 'fail'}, {elapsed:.3f}s")
    assert ok
    assert lam_rel <= 1e-8


# 2 ------------------------------------------------------------------------

def test_criterion_2_randomized_residual_suite(report, suite):
    runs, elapsed = suite
    fams = {a.utility.family for r in runs for a in r[2]}
    caps = {c["kind"] for r in runs for c in (a.get("cap", {"kind": "none"})
                                               for a in r[0].agent_specs)}
    shape_ok = (max(r[0].d for r in runs) <= 4 and max(r[1].K for r in runs) <= 5
                and max(int(r[1].n_children.max()) for r in runs) <= 3
                and {"log", "power"} <= fams and {"none", "proportional", "overdraft"} <= caps)
    failed = [(r[0].seed, r[5].failed()) for r in runs if not r[5].passed]
    limits = {"consumption_clearing": 1e-10, "budget": 1e-9, "kkt_first_order": 1e-8,
              "dual_gap": 1e-7, "portfolio_clearing": 0.0, "terminal_wealth": 1e-8,
              "discounted_assets_martingale": 1e-11, "unique_martingale_measure": 1e-10}
    maxima = {k: worst(runs, k) for k in limits}
    ok = (len(runs) >= 50 and shape_ok and not failed and elapsed < 60
          and all(maxima[k] <= v for k, v in limits.items()))
    report("2 randomized residual suite", ok,
           f"{len(runs)} scenarios, {len(runs) - len(failed)} certified, {elapsed:.1f}s; "
           + ", ".join(f"{k} {v:.1e}" for k, v in maxima.items()))
    assert ok, failed


# 3 ------------------------------------------------------------------------

def test_criterion_3_coalition_formula(report, suite):
    runs, _ = suite
    small = [r for r in runs if r[0].d <= 4]
    w = worst(small, "coalition_formula")
    ok = bool(small) and w <= 1e-8
    report("3 coalition formula equivalence", ok, f"{len(small)} scenarios, max gap {w:.1e}")
    assert ok


# 4 ------------------------------------------------------------------------

def test_criterion_4_decomposition_exactness(report, suite):
    runs, _ = suite
    recon = worst(runs, "density_reconstruction")
    mart = worst(runs, "density_martingale")
    pred = worst(runs, "beta_predictable")
    ident = worst(runs, "pricing_identity")
    ok = recon <= 1e-12 and mart <= 1e-13 and pred == 0.0 and ident <= 1e-11
    report("4 decomposition exactness", ok,
           f"Q - Qhat beta {recon:.1e}, Qhat martingale {mart:.1e}, beta sibling spread "
           f"{pred:.1e}, pricing identity {ident:.1e} (10 processes each)")
    assert ok


# 5 ------------------------------------------------------------------------

def test_criterion_5_best_response_and_deviations(report, suite):
    runs, _ = suite
    br = worst(runs, "best_response_oracle")
    dev = worst(runs, "deviation_test")
    ok = br <= 1e-6 and dev <= 1e-9
    report("5 best-response oracle and deviations", ok,
           f"oracle sup gap {br:.1e}, best of {DEVIATIONS} deviations per agent {dev:+.1e}")
    assert ok


# 6 ------------------------------------------------------------------------

def _random_pair(seed):
    rng = np.random.default_rng(seed)
    tree = build_tree({"K": int(rng.integers(2, 5)), "branching": int(rng.integers(2, 4)),
                       "seed": seed})
    a = rng.normal(size=5)
    f = AnalyticFunction(lambda t, x: np.polyval(a, x) + 0.3 * t * x,
                         lambda t, x: np.polyval(np.polyder(a), x) + 0.3 * t)
    return tree, f, rng.uniform(-2, 2, tree.n_nodes)


def test_criterion_6_toolkit(report):
    # (a) exact martingale part on seeded pairs, plus the x^2 hand example
    res = max(martingale_residual(t, semifun_decompose(t, f, X).martingale.values)
              for t, f, X in map(_random_pair, range(100)))
    two = build_tree({"K": 1, "branching": 2, "probs": [0.5, 0.5]})
    dec = semifun_decompose(two, AnalyticFunction(lambda t, x: x ** 2, lambda t, x: 2 * x),
                            [1.0, 2.0, 0.0])
    hand = (dec.martingale.values[1:].tolist() == [2.0, -2.0]
            and dec.drift.values[1:].tolist() == [1.0, 1.0])
    ok_a = res <= 1e-13 and hand

    # (b) x^3 - x split with analytic derivatives
    x = np.linspace(-1.0, 1.0, 100001)
    gf = GridFunction.from_callable(lambda t, x: x ** 3 - x, [0.0], x,
                                    lambda t, x: 3 * x ** 2 - 1)
    sp = convexity_split(gf)
    err_b = float(np.max(np.abs(sp.f1.values - sp.f2.values - gf.values)))
    ok_b = err_b <= 1e-9

    # (c) inverse split reconstruction order on x + x^3
    errs, ords = orders([40, 80, 160, 320])
    ok_c = min(ords) >= 1.8

    # (d) factor-2 min stability on seeded pairs
    ratios, ok_d = [], True
    for seed in range(100):
        rng = np.random.default_rng(seed)
        t = build_tree({"K": 3, "branching": 2, "seed": seed})
        rep = min_stability(t, *rng.normal(size=(2, t.n_nodes)))
        ok_d &= rep["bound_factor_2"]
        ratios.append(rep["ratio"])

    ok = ok_a and ok_b and ok_c and ok_d
    report("6 toolkit", ok,
           f"(a) residual {res:.1e}, hand example {'exact' if hand else 'WRONG'}; "
           f"(b) reconstruction {err_b:.1e}; (c) orders "
           + "/".join(f"{o:.2f}" for o in ords)
           + f"; (d) factor 2 holds, max ratio {max(ratios):.2f}")
    assert ok


# 7 ------------------------------------------------------------------------

def test_criterion_7_main_conclusions(report, suite):
    runs, _ = suite
    uq = worst(runs, "unique_martingale_measure")
    bound = all(r[3].allocations.max() <= sum(a.e for a in r[2]).max() for r in runs)
    ok = uq <= 1e-10 and bound and all(r[5]["consumption_bounded"].passed for r in runs)
    report("7 unique martingale measure and bounded consumption", ok,
           f"measure max deviation {uq:.1e}; max c <= max e_agg on all {len(runs)} scenarios")
    assert ok


# 8 ------------------------------------------------------------------------

def test_criterion_8_determinism(report, tmp_path):
    checked, same = 0, True
    for seed in list(SUITE_SEEDS)[::6]:
        p = tmp_path / f"s{seed}.json"
        write_scenario(random_scenario(seed), p)
        outs = [tmp_path / f"run{seed}_{k}" for k in range(2)]
        for out in outs:
            assert main(["all", "--scenario", str(p), "--out", str(out),
                         "--deviations", "20", "--cross-check"]) == EXIT_OK
        files = sorted(q.relative_to(outs[0]) for q in outs[0].rglob("*") if q.is_file())
        same &= files == sorted(q.relative_to(outs[1]) for q in outs[1].rglob("*")
                                if q.is_file())
        same &= all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
        checked += 1
    report("8 determinism", same, f"{checked} suite scenarios rerun, artifacts byte-identical")
    assert same
