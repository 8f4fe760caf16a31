import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from equilibrage.lattice import EventTree, TimeGrid, TreeProcess, build_tree
from equilibrage.preferences import (AgentSpec, UtilityError, UtilitySpec, build_cap,
                                     build_endowment, convexity_norm, dual_value,
                                     eval_inverse_marginal, regularity_report,
                                     utility_functional)

LOG = UtilitySpec("log")


def two_leaf():
    return EventTree(TimeGrid([0.0, 1.0]), [-1, 0, 0], [1.0, 0.5, 0.5])


def families():
    ys = np.geomspace(1e-3, 1e3, 61)
    # inverse marginal of u(x) = 2 sqrt(x): i(y) = y^-2
    table = {"y": ys.tolist(), "I": (ys ** -2.0).tolist()}
    return [UtilitySpec("log", beta=0.0), UtilitySpec("log", beta=0.1),
            UtilitySpec("power", p=0.5, beta=0.05), UtilitySpec("power", p=-2.0),
            UtilitySpec("power", p=-0.5, beta=0.02),
            UtilitySpec("tabulated", beta=0.03, table=table)]


# -- inverse marginal

def test_inverse_marginal_log():
    assert eval_inverse_marginal(LOG, 0.3, 2.0) == pytest.approx(0.5)
    assert eval_inverse_marginal(UtilitySpec("log", beta=0.1), 1.0, 1.0) == \
        pytest.approx(math.exp(-0.1), rel=1e-12)


def test_inverse_marginal_power_convention():
    # U = x^p / p, so U_x = x^(p-1) and I(1) = 1 for every p
    u = UtilitySpec("power", p=0.5)
    assert eval_inverse_marginal(u, 0.0, 1.0) == pytest.approx(1.0)
    assert eval_inverse_marginal(u, 0.0, 0.5) == pytest.approx(4.0)


def test_inverse_marginal_of_unnormalised_power():
    # U = x^0.5 has U_x = 0.5 x^-0.5, hence I(1) = 0.25; a tabulated utility
    # reproduces that arithmetic from its inverse-marginal table alone
    ys = np.geomspace(1e-2, 1e2, 41)
    u = UtilitySpec("tabulated", table={"y": ys.tolist(), "I": (0.25 * ys ** -2).tolist()})
    assert eval_inverse_marginal(u, 0.0, 1.0) == pytest.approx(0.25, rel=1e-10)
    assert u.U_x(0.0, 0.25) == pytest.approx(1.0, rel=1e-10)


def test_inverse_marginal_bisection_oracle():
    from scipy.optimize import brentq
    u = UtilitySpec("log", beta=0.1)
    x = brentq(lambda x: float(u.U_x(1.0, x)) - 1.0, 1e-6, 10, xtol=1e-15)
    assert eval_inverse_marginal(u, 1.0, 1.0) == pytest.approx(x, rel=1e-12)


def test_inverse_marginal_rejects_nonpositive():
    with pytest.raises(UtilityError):
        eval_inverse_marginal(LOG, 0.0, 0.0)


@pytest.mark.parametrize("kw", [dict(family="power", p=1.0), dict(family="power", p=0.0),
                                dict(family="log", beta=-0.1), dict(family="cubic")])
def test_bad_utilities(kw):
    with pytest.raises(UtilityError):
        UtilitySpec(**kw)


@pytest.mark.parametrize("u", families(), ids=lambda u: f"{u.family}-{u.p}-{u.beta}")
def test_inversion_and_monotonicity(u):
    t = np.linspace(0, 1, 5)[:, None]
    x = np.geomspace(0.05, 20, 40)[None, :]
    np.testing.assert_allclose(u.I(t, u.U_x(t, x)), np.broadcast_to(x, (5, 40)), rtol=1e-10)
    y = np.geomspace(0.01, 100, 50)
    assert np.all(np.diff(u.I(0.5, y)) < 0)
    # concavity of U on a grid
    vals = u.U(0.5, x[0])
    h = np.diff(x[0])
    slopes = np.diff(vals) / h
    assert np.all(np.diff(slopes) < 0)


# -- utility functional

def test_utility_functional_examples():
    t = two_leaf()
    assert utility_functional(t, LOG, np.ones(3)) == pytest.approx(0.0)
    path = EventTree(TimeGrid([0.0, 1.0]), [-1, 0], [1.0, 1.0])
    assert utility_functional(path, LOG, np.full(2, math.e)) == pytest.approx(2.0)
    assert utility_functional(t, LOG, [1.0, 2.0, 0.5]) == pytest.approx(0.0, abs=1e-15)


def test_utility_functional_edge_cases():
    t = two_leaf()
    assert utility_functional(t, LOG, [1.0, 0.0, 1.0]) == -math.inf
    assert utility_functional(t, UtilitySpec("power", p=-1.0), [1.0, 0.0, 1.0]) == -math.inf
    assert math.isfinite(utility_functional(t, UtilitySpec("power", p=0.5), [1.0, 0.0, 1.0]))
    with pytest.raises(UtilityError):
        utility_functional(t, LOG, [1.0, -0.1, 1.0])


# -- dual function

def test_dual_value_examples():
    assert dual_value(LOG, 0.0, 1.0) == pytest.approx(-1.0)
    assert dual_value(LOG, 0.0, 0.5, 1.0) == pytest.approx(-0.5)
    assert dual_value(LOG, 0.0, 2.0, 1.0) == pytest.approx(math.log(0.5) - 1.0)
    with pytest.raises(UtilityError):
        dual_value(LOG, 0.0, 0.0)


@pytest.mark.parametrize("u", families(), ids=lambda u: f"{u.family}-{u.p}-{u.beta}")
def test_fenchel_inequality(u):
    rng = np.random.default_rng(1)
    for _ in range(30):
        t, lam = rng.uniform(0, 1), float(np.exp(rng.normal()))
        xi = float(np.exp(rng.normal())) if rng.random() < 0.5 else math.inf
        V = dual_value(u, t, lam, xi)
        x = np.geomspace(1e-3, min(xi, 50.0), 200)
        assert np.all(u.U(t, x) <= lam * x + V + 1e-10 * (1 + abs(V)))
        xs = min(xi, float(u.I(t, lam)))
        assert float(u.U(t, xs)) == pytest.approx(lam * xs + V, rel=1e-10, abs=1e-10)


def test_dual_value_convex_nonincreasing_in_lambda():
    lam = np.linspace(0.2, 5, 200)
    for u in families():
        for xi in (math.inf, 1.3):
            v = dual_value(u, 0.4, lam, xi)
            assert np.all(np.diff(v) <= 1e-12)
            assert np.all(np.diff(v, 2) >= -1e-10)


# -- convexity norm

def test_convexity_norm_examples():
    x = np.linspace(0, 1, 101)
    assert convexity_norm(x, x ** 2, 2 * x) == pytest.approx(2.0)
    assert convexity_norm(x, 0.5 - 3 * x, np.full_like(x, -3.0)) == pytest.approx(3.5)
    z = np.linspace(-1, 1, 201)
    assert convexity_norm(z, z ** 3 - z, 3 * z ** 2 - 1) == pytest.approx(8.0)
    with pytest.raises(ValueError):
        convexity_norm(x[::-1], x, x)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_convexity_norm_subadditive(seed):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(-2, 2, 30))
    x = np.unique(x)
    f, g = rng.normal(size=(2, x.size))
    assert convexity_norm(x, f + g) <= convexity_norm(x, f) + convexity_norm(x, g) + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_utility_functional_concave(seed):
    rng = np.random.default_rng(seed)
    tree = build_tree({"K": 3, "branching": 2, "seed": seed % 97})
    for u in families():
        c1, c2 = np.exp(rng.normal(size=(2, tree.n_nodes)))
        mid = utility_functional(tree, u, 0.5 * (c1 + c2))
        assert mid >= 0.5 * (utility_functional(tree, u, c1) +
                             utility_functional(tree, u, c2)) - 1e-12


# -- agents and regularity

def test_endowment_and_caps():
    tree = build_tree({"K": 3, "branching": 2, "seed": 2})
    e = build_endowment(tree, {"generator": "shock", "seed": 5, "lo": 0.5, "hi": 2.0})
    assert e.values.min() >= 0.5 and e.values.max() <= 2.0
    leaf = tree.level_slice(tree.K)
    for spec in ({"kind": "none"}, {"kind": "proportional", "gamma": 1.5},
                 {"kind": "overdraft", "delta": 0.2}):
        g = build_cap(tree, e, spec).values
        assert np.all(np.isinf(g[leaf]))
        assert np.all(g > e.values)
    np.testing.assert_allclose(build_cap(tree, e, {"kind": "proportional", "gamma": 1.5})
                               .values[:leaf.start], 1.5 * e.values[:leaf.start])
    with pytest.raises(ValueError):
        build_cap(tree, e, {"kind": "weird"})


def test_markov_endowment():
    tree = build_tree({"generator": "markov", "K": 2, "transition": [[0.5, 0.5], [0.2, 0.8]]})
    e = build_endowment(tree, {"generator": "markov", "values": [1.0, 1.5]})
    np.testing.assert_array_equal(e.values, np.array([1.0, 1.5])[tree.state])


def test_regularity_report_examples():
    tree = build_tree({"K": 2, "branching": 2, "seed": 0})
    rng = np.random.default_rng(0)
    agents = [AgentSpec(LOG, TreeProcess(rng.uniform(0.8, 1.25, tree.n_nodes)), epsilon=0.5)
              for _ in range(2)]
    rep = regularity_report(tree, agents)
    assert rep["pass"]
    items = {it["check"]: it for it in rep["agents"][0]["items"]}
    assert items["endowment_bounds"]["pass"] and math.isfinite(items["endowment_N"]["value"])
    assert items["convexity_lipschitz"]["value"] == pytest.approx(0.0, abs=1e-12)
    assert items["utility_bounded_in_t"]["detail"] == "not verified"

    e = TreeProcess(np.ones(tree.n_nodes))
    cap = np.full(tree.n_nodes, 2.0)
    cap[1] = 1.0
    cap[tree.level_slice(tree.K)] = np.inf
    bad = AgentSpec(LOG, e, TreeProcess(cap))
    rep = regularity_report(tree, [bad])
    items = {it["check"]: it for it in rep["agents"][0]["items"]}
    assert not rep["pass"] and not items["cap_above_endowment"]["pass"]
    assert "node 1" in items["cap_above_endowment"]["detail"]
    assert any("node 1" in p for p in bad.problems(tree))


def test_regularity_lipschitz_positive_with_impatience():
    tree = build_tree({"K": 2, "branching": 2, "seed": 0})
    a = AgentSpec(UtilitySpec("log", beta=0.1), TreeProcess(np.ones(tree.n_nodes)))
    items = {it["check"]: it for it in regularity_report(tree, [a])["agents"][0]["items"]}
    assert items["convexity_lipschitz"]["value"] > 0
