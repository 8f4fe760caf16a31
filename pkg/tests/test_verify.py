import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from equilibrage.lattice import EventTree, TimeGrid, TreeProcess, build_tree
from equilibrage.marketize import MarketRealization, marketize, simulate_wealth
from equilibrage.negishi import solve
from equilibrage.preferences import AgentSpec, UtilitySpec, utility_functional
from equilibrage.scenario import random_scenario
from equilibrage.verify import (Check, Tolerances, certify, deviation_test,
                                oracle_best_response, random_deviation, uniqueness_check)

LOG = UtilitySpec("log")


def built(tree, agents):
    sol = solve(tree, agents)
    return sol, marketize(tree, agents, sol)


def autarky():
    tree = build_tree({"K": 3, "branching": 2, "seed": 4})
    e = np.random.default_rng(3).uniform(0.5, 2, tree.n_nodes)
    return tree, [AgentSpec(UtilitySpec("power", p=-0.5, beta=0.05), TreeProcess(e))]


def symmetric():
    tree = build_tree({"K": 3, "branching": 3, "seed": 6})
    e = np.random.default_rng(4).uniform(0.5, 2, tree.n_nodes)
    return tree, [AgentSpec(LOG, TreeProcess(e)) for _ in range(2)]


def capped():
    tree = build_tree({"K": 3, "branching": 2, "seed": 2})
    rng = np.random.default_rng(5)
    e1 = rng.uniform(1.0, 2.0, tree.n_nodes)
    e2 = rng.uniform(0.5, 1.0, tree.n_nodes)
    cap = 1.05 * e2
    cap[tree.level_slice(tree.K)] = math.inf
    return tree, [AgentSpec(LOG, TreeProcess(e1)),
                  AgentSpec(UtilitySpec("log", beta=0.1), TreeProcess(e2), TreeProcess(cap))]


# -- certificate

def test_check_pass_flag():
    assert Check("a", "x", 0.0, 0.0).passed
    assert not Check("a", "x", math.nan, 1.0).passed
    assert not Check("a", "x", math.inf, 1.0).passed
    assert Check("a", "x", 5.0, math.inf).passed


def test_autarky_certificate():
    tree, agents = autarky()
    sol, m = built(tree, agents)
    cert = certify(tree, agents, sol, m, deviations=100, seed=1)
    assert cert.passed, cert.failed()
    for c in cert.checks:
        if c.check not in ("gains_bounded_below", "deviation_test"):
            assert c.residual <= 1e-11, c.check
    assert cert["deviation_test"].residual <= 1e-9
    d = cert.as_dict()
    assert d["verdict"] is True
    assert {"check", "paper_anchor", "residual", "tol", "pass"} <= set(d["checks"][0])


def test_corrupted_portfolio_is_caught():
    tree, agents = symmetric()
    sol, m = built(tree, agents)
    H = m.H.copy()
    # corrupt one component for agent 1 below a single parent so it stays predictable
    u = int(tree.inner[1])
    H[0, tree.children(u), 0] += 0.1
    bad = dataclasses.replace(m, H=H)
    cert = certify(tree, agents, sol, bad)
    failed = set(cert.failed())
    assert {"portfolio_clearing", "terminal_wealth"} <= failed
    # the extra gains have zero qhat-mean, so some leaf also ends up negative
    assert failed <= {"portfolio_clearing", "terminal_wealth", "wealth_nonnegative"}


def test_wealth_dump_mismatch_is_caught():
    tree, agents = symmetric()
    sol, m = built(tree, agents)
    X = m.X.copy()
    X[1, 5] += 1e-6
    cert = certify(tree, agents, sol, m, X_dump=X)
    assert cert.failed() == ["wealth_dump_consistency"]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6), st.lists(st.booleans(), min_size=18, max_size=18))
def test_certify_monotone_in_tolerances(seed, loosen):
    tree, agents = random_scenario(seed).build()
    sol, m = built(tree, agents)
    # a tampered market so that some checks fail
    H = m.H.copy()
    H[0] *= 1.0 + 1e-6
    m = dataclasses.replace(m, H=H)
    base = Tolerances()
    names = [f.name for f in dataclasses.fields(Tolerances)]
    wide = Tolerances(**{n: getattr(base, n) * (10.0 if flag else 1.0) + (1e-12 if flag else 0)
                         for n, flag in zip(names, loosen)})
    a = certify(tree, agents, sol, m, base)
    b = certify(tree, agents, sol, m, wide)
    for ca, cb in zip(a.checks, b.checks):
        assert ca.check == cb.check
        assert not (ca.passed and not cb.passed)


# -- best-response oracle

def test_oracle_autarky_and_symmetric():
    tree, agents = autarky()
    sol, _ = built(tree, agents)
    np.testing.assert_allclose(oracle_best_response(tree, agents[0], sol.Q), agents[0].e,
                               rtol=1e-9)
    tree, agents = symmetric()
    sol, _ = built(tree, agents)
    e = sum(a.e for a in agents)
    for a in agents:
        np.testing.assert_allclose(oracle_best_response(tree, a, sol.Q), e / 2, rtol=1e-9)


def test_oracle_capped_matches_solver():
    tree, agents = capped()
    sol, _ = built(tree, agents)
    at_cap = np.isclose(sol.allocations[1], agents[1].gamma, rtol=0, atol=1e-14)
    assert at_cap.any()
    c = oracle_best_response(tree, agents[1], sol.Q)
    np.testing.assert_allclose(c, sol.allocations[1], atol=1e-6)
    np.testing.assert_array_equal(c[at_cap], agents[1].gamma[at_cap])


def test_oracle_ignores_solver_weights():
    tree, agents = capped()
    sol, m = built(tree, agents)
    ref = certify(tree, agents, sol, m)["best_response_oracle"].residual
    bent = dataclasses.replace(sol, weights=sol.weights * np.array([3.0, 0.2]))
    assert certify(tree, agents, bent, m)["best_response_oracle"].residual == ref


def test_oracle_budget_binds():
    tree, agents = capped()
    sol, _ = built(tree, agents)
    for a in agents:
        c = oracle_best_response(tree, a, sol.Q)
        wq = tree.prob * tree.node_weights * sol.Q
        assert abs(np.dot(wq, c - a.e)) <= 1e-10 * max(1.0, np.dot(wq, a.e))


# -- deviations

def test_identity_deviation_has_zero_gap():
    tree, agents = capped()
    sol, m = built(tree, agents)
    rng = np.random.default_rng(0)
    for i, a in enumerate(agents):
        H, c = random_deviation(tree, m.B, m.S, a, sol.allocations[i], m.H[i], rng, sigma=0.0)
        gap = utility_functional(tree, a.utility, c) - \
            utility_functional(tree, a.utility, sol.allocations[i])
        assert abs(gap) <= 1e-9


@pytest.mark.parametrize("seed", [0, 3, 8, 21])
def test_scaled_down_consumption_is_affordable_and_worse(seed):
    tree, agents = random_scenario(seed).build()
    sol, m = built(tree, agents)
    for i, a in enumerate(agents):
        c = 0.9 * sol.allocations[i]
        X = simulate_wealth(tree, m.B, m.S, m.H[i], c, a.e)
        assert X[tree.level_slice(tree.K)].min() >= 0
        assert utility_functional(tree, a.utility, c) < \
            utility_functional(tree, a.utility, sol.allocations[i])


def test_deviation_report():
    tree, agents = capped()
    sol, m = built(tree, agents)
    rep = deviation_test(tree, m, agents[0], 0, sol.allocations[0], 100, seed=7)
    assert rep["count"] == 100 and rep["gaps"].shape == (100,)
    assert rep["max_gap"] <= 1e-9
    again = deviation_test(tree, m, agents[0], 0, sol.allocations[0], 100, seed=7)
    np.testing.assert_array_equal(rep["gaps"], again["gaps"])


def test_deviations_are_affordable():
    tree, agents = capped()
    sol, m = built(tree, agents)
    rng = np.random.default_rng(2)
    a = agents[1]
    for _ in range(20):
        H, c = random_deviation(tree, m.B, m.S, a, sol.allocations[1], m.H[1], rng)
        assert np.all(c <= a.gamma) and np.all(c >= 0)
        X = simulate_wealth(tree, m.B, m.S, H, c, a.e)
        assert np.max(np.abs(X[tree.level_slice(tree.K)])) <= 1e-9


def test_deviation_threads_match_serial():
    tree, agents = capped()
    sol, m = built(tree, agents)
    a = certify(tree, agents, sol, m, deviations=30, workers=1)
    b = certify(tree, agents, sol, m, deviations=30, workers=2)
    assert a.as_dict() == b.as_dict()


# -- uniqueness of the martingale measure

def hand_market(a, b):
    tree = EventTree(TimeGrid([0.0, 1.0]), [-1, 0, 0], [1.0, b / (a + b), a / (a + b)])
    S = np.array([[1.0], [1.0 + a], [1.0 - b]])
    one = np.ones(3)
    return tree, MarketRealization(qhat=tree, qhat_density=one, beta=one, B=one, Y=S, S=S,
                                   H=np.zeros((1, 3, 1)), X=np.zeros((1, 3)),
                                   Xtilde=np.zeros((1, 3)))


@pytest.mark.parametrize("a,b", [(0.5, 0.5), (0.2, 0.7), (1.3, 0.1)])
def test_uniqueness_hand_solve(a, b):
    tree, m = hand_market(a, b)
    rep = uniqueness_check(tree, m)
    assert rep["pass"] and rep["max_deviation"] <= 1e-15


def test_uniqueness_rank_failure():
    tree, m = hand_market(0.5, 0.5)
    m.S[:] = 1.0
    rep = uniqueness_check(tree, m)
    assert not rep["pass"]
    assert rep["rank_failure"] == (tree.ids[0], 1, 2)


def test_uniqueness_vacuous_on_deterministic_nodes():
    tree = build_tree({"K": 2, "branching": [1, 2], "seed": 1})
    agents = [AgentSpec(LOG, TreeProcess(np.linspace(1, 2, tree.n_nodes))),
              AgentSpec(LOG, TreeProcess(np.linspace(2, 1, tree.n_nodes)))]
    sol, m = built(tree, agents)
    assert uniqueness_check(tree, m)["pass"]
