"""Finite event trees and the discrete process calculus living on them.

Nodes are stored in (level, parent) order, so the children of any node form a
contiguous block and every level is a contiguous slice.  Processes are plain
per-node arrays; predictable processes repeat the parent-measurable value on
every sibling.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

import numpy as np

PROB_TOL = 1e-14
BUILD_TOL = 1e-13
VERIFY_TOL = 1e-12

FLAVORS = ("adapted", "predictable", "optional")


class TreeError(ValueError):
    """Invalid tree description or tree-structural violation."""


# --------------------------------------------------------------------------
# time grid and kappa weights


@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise TreeError("times: need at least two grid points (K >= 1)")
        if t[0] != 0.0:
            raise TreeError("times: grid must start at 0")
        if np.any(np.diff(t) <= 0):
            raise TreeError("times: must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @property
    def K(self) -> int:
        return self.times.size - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def kappa_weights(self) -> np.ndarray:
        return kappa_weights(self)

    @classmethod
    def uniform(cls, K: int, T: float = 1.0) -> "TimeGrid":
        if K < 1 or T <= 0:
            raise TreeError("K must be >= 1 and T > 0")
        return cls(np.linspace(0.0, T, K + 1))


def kappa_weights(grid: TimeGrid) -> np.ndarray:
    """Left-endpoint Lebesgue weights on [0, T) plus the unit atom at T."""
    w = np.empty(grid.K + 1)
    w[:-1] = np.diff(grid.times)
    w[-1] = 1.0
    return w


# --------------------------------------------------------------------------
# event tree


class EventTree:
    """A finite filtration.

    Parameters
    ----------
    grid : TimeGrid
    parent : int array, ``parent[0] == -1`` and ``parent[v] < v``; parents are
        non-decreasing so that siblings are contiguous.
    p_cond : conditional probability of reaching each node from its parent
        (ignored for the root, stored as 1).
    ids : optional external node labels.
    state : optional integer label per node (Markov-modulated trees).
    """

    def __init__(self, grid: TimeGrid, parent, p_cond, ids=None, state=None):
        parent = np.asarray(parent, dtype=np.int64)
        p_cond = np.asarray(p_cond, dtype=float).copy()
        n = parent.size
        if n == 0 or parent[0] != -1:
            raise TreeError("nodes: the first node must be the unique root (parent -1)")
        if p_cond.shape != parent.shape:
            raise TreeError("p_cond: one value per node required")
        if n > 1:
            rest = parent[1:]
            if np.any(rest < 0) or np.any(rest >= np.arange(1, n)):
                bad = int(np.nonzero((rest < 0) | (rest >= np.arange(1, n)))[0][0]) + 1
                raise TreeError(f"nodes[{bad}]: parent must precede the node")
            if np.any(np.diff(rest) < 0):
                raise TreeError("nodes: must be listed in (level, parent) order")
        level = np.zeros(n, dtype=np.int64)
        for v in range(1, n):
            level[v] = level[parent[v]] + 1
        p_cond[0] = 1.0

        self.grid = grid
        self.parent = parent
        self.p_cond = p_cond
        self.level = level
        self.ids = list(range(n)) if ids is None else list(ids)
        self.state = None if state is None else np.asarray(state, dtype=np.int64)

        K = grid.K
        n_children = np.bincount(parent[1:], minlength=n) if n > 1 else np.zeros(n, np.int64)
        self.n_children = n_children
        child_start = np.zeros(n, dtype=np.int64)
        if n > 1:
            firsts = np.r_[1, np.nonzero(np.diff(parent[1:]))[0] + 2]
            child_start[parent[firsts]] = firsts
        self.child_start = child_start

        bad_leaf = np.nonzero((n_children == 0) & (level != K))[0]
        if bad_leaf.size:
            raise TreeError(f"node {self.ids[bad_leaf[0]]}: leaf at level "
                            f"{level[bad_leaf[0]]} != K={K}")
        if level.max() != K:
            raise TreeError(f"tree depth {level.max()} does not match grid K={K}")
        bad_p = np.nonzero(~(p_cond[1:] > 0) | ~np.isfinite(p_cond[1:]))[0]
        if bad_p.size:
            v = bad_p[0] + 1
            raise TreeError(f"node {self.ids[v]}: conditional probability must be > 0")
        sums = self._child_sum(p_cond)
        inner = n_children > 0
        dev = np.abs(sums[inner] - 1.0)
        if dev.size and dev.max() > PROB_TOL:
            u = np.nonzero(inner)[0][int(np.argmax(dev))]
            raise TreeError(f"node {self.ids[u]}: children probabilities sum to "
                            f"{sums[u]!r}, not 1")

        prob = np.empty(n)
        prob[0] = 1.0
        for v in range(1, n):
            prob[v] = prob[parent[v]] * p_cond[v]
        self.prob = prob
        self.level_start = np.searchsorted(level, np.arange(K + 2))
        self.node_times = grid.times[level]
        self.node_weights = kappa_weights(grid)[level]
        for arr in (self.parent, self.p_cond, self.level, self.prob, self.n_children,
                    self.child_start):
            arr.setflags(write=False)

    # -- shape helpers
    @property
    def n_nodes(self) -> int:
        return self.parent.size

    @property
    def K(self) -> int:
        return self.grid.K

    def level_slice(self, k: int) -> slice:
        return slice(int(self.level_start[k]), int(self.level_start[k + 1]))

    def children(self, u: int) -> range:
        s = int(self.child_start[u])
        return range(s, s + int(self.n_children[u]))

    @property
    def leaves(self) -> np.ndarray:
        return np.arange(*self.level_slice(self.K).indices(self.n_nodes))

    @property
    def inner(self) -> np.ndarray:
        return np.nonzero(self.n_children > 0)[0]

    def paths(self) -> list[np.ndarray]:
        """Root-to-leaf node index paths, in leaf order."""
        out = []
        for leaf in self.leaves:
            path = [int(leaf)]
            while self.parent[path[-1]] >= 0:
                path.append(int(self.parent[path[-1]]))
            out.append(np.array(path[::-1]))
        return out

    # -- one-step operators
    def _child_sum(self, x: np.ndarray) -> np.ndarray:
        if self.parent.size == 1:
            return np.zeros(1)
        return np.bincount(self.parent[1:], weights=x[1:], minlength=self.parent.size)

    def step_expectation(self, x) -> np.ndarray:
        """``E[x_{k+1} | node]`` at every inner node (leaves get NaN)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            return np.stack([self.step_expectation(x[:, j]) for j in range(x.shape[1])], 1)
        out = self._child_sum(self.p_cond * x)
        out[self.n_children == 0] = np.nan
        return out

    def increment_expectation(self, x) -> np.ndarray:
        """``E[x_{k+1} - x_k | node]`` at every inner node (leaves get 0)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            return np.stack([self.increment_expectation(x[:, j]) for j in range(x.shape[1])], 1)
        d = np.zeros_like(x)
        d[1:] = x[1:] - x[self.parent[1:]]
        return self._child_sum(self.p_cond * d)

    def to_children(self, y) -> np.ndarray:
        """Broadcast a parent-indexed array to a predictable per-node array (root -> 0)."""
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        out[1:] = y[self.parent[1:]]
        return out

    def expectation(self, x) -> float:
        """Unconditional expectation of a level-K variable given per node."""
        sl = self.level_slice(self.K)
        return float(np.dot(self.prob[sl], np.asarray(x, dtype=float)[sl]))

    def kappa_integral(self, x) -> float:
        """``E[ int x dkappa ]`` for an adapted process."""
        return float(np.dot(self.prob * self.node_weights, np.asarray(x, dtype=float)))

    def same_structure(self, other: "EventTree") -> bool:
        return (np.array_equal(self.parent, other.parent)
                and np.array_equal(self.grid.times, other.grid.times))

    def __eq__(self, other):
        if not isinstance(other, EventTree):
            return NotImplemented
        return (self.same_structure(other) and np.array_equal(self.p_cond, other.p_cond)
                and self.ids == other.ids)

    __hash__ = None

    def with_probs(self, p_cond) -> "EventTree":
        return EventTree(self.grid, self.parent, p_cond, ids=self.ids, state=self.state)

    def __repr__(self):
        return f"EventTree(K={self.K}, nodes={self.n_nodes}, leaves={self.leaves.size})"


# --------------------------------------------------------------------------
# processes


@dataclass(frozen=True, eq=False)
class TreeProcess:
    values: np.ndarray
    flavor: str = "adapted"

    def __post_init__(self):
        if self.flavor not in FLAVORS:
            raise ValueError(f"unknown flavor {self.flavor!r}")
        v = np.array(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def as_values(X) -> np.ndarray:
    if isinstance(X, TreeProcess):
        return X.values
    return np.asarray(X, dtype=float)


def sibling_deviation(tree: EventTree, x) -> float:
    """Largest spread of ``x`` across siblings (0 for predictable processes)."""
    x = as_values(x)
    if tree.n_nodes == 1:
        return 0.0
    ref = x[tree.child_start[tree.parent[1:]]]
    dev = np.abs(x[1:] - ref)
    return float(np.nanmax(dev)) if dev.size else 0.0


def predictable(tree: EventTree, x) -> TreeProcess:
    """Wrap values as a predictable process, checking sibling constancy."""
    x = as_values(x)
    if sibling_deviation(tree, x) != 0.0:
        raise TreeError("predictable process must be constant across siblings")
    return TreeProcess(x, "predictable")


def _require_finite(x, what="process"):
    if not np.all(np.isfinite(x)):
        i = int(np.nonzero(~np.isfinite(x))[0][0])
        raise TreeError(f"{what} must be finite (node {i})")


def martingale_residual(tree: EventTree, M) -> float:
    """``max_u |E[M_{k+1} - M_k | u]|`` over inner nodes."""
    r = tree.increment_expectation(as_values(M))
    return float(np.max(np.abs(r))) if r.size else 0.0


def conditional_expectation(tree: EventTree, X, j: int, k: int | None = None) -> np.ndarray:
    """``E[X_k | F_j]`` as an array over the level-``j`` nodes.

    ``X`` is any per-node array; only its level-``k`` values are read.
    """
    k = tree.K if k is None else k
    if not 0 <= j <= k <= tree.K:
        raise TreeError(f"target level {j} must satisfy 0 <= j <= k={k}")
    x = as_values(X)
    sl = tree.level_slice(k)
    _require_finite(x[sl])
    cur = np.zeros(tree.n_nodes)
    cur[sl] = x[sl]
    for lev in range(k - 1, j - 1, -1):
        s = tree.level_slice(lev)
        cur[s] = tree.step_expectation(cur)[s]
    return cur[tree.level_slice(j)].copy()


def backward_expectation(tree: EventTree, terminal, p_cond=None) -> np.ndarray:
    """``E[X_K | F_level(v)]`` at every node, optionally under other conditional probs."""
    t = tree if p_cond is None else tree.with_probs(p_cond)
    x = as_values(terminal)
    out = np.zeros(tree.n_nodes)
    sl = tree.level_slice(tree.K)
    out[sl] = x[sl]
    for lev in range(tree.K - 1, -1, -1):
        s = tree.level_slice(lev)
        out[s] = t.step_expectation(out)[s]
    return out


# --------------------------------------------------------------------------
# decompositions


@dataclass(frozen=True)
class Decomposition:
    martingale_part: TreeProcess
    predictable_part: TreeProcess
    bracket: TreeProcess


def doob_decompose(tree: EventTree, X) -> Decomposition:
    """Split an adapted process into martingale plus predictable drift."""
    x = as_values(X)
    _require_finite(x)
    drift = tree.increment_expectation(x)      # at the parent
    dA = tree.to_children(drift)
    A = np.zeros(tree.n_nodes)
    for v in range(1, tree.n_nodes):
        A[v] = A[tree.parent[v]] + dA[v]
    M = x - A
    dM = np.zeros(tree.n_nodes)
    dM[1:] = M[1:] - M[tree.parent[1:]]
    br = _bracket_from_increments(tree, dM)
    return Decomposition(TreeProcess(M), TreeProcess(A, "predictable"),
                         TreeProcess(br, "predictable"))


def _bracket_from_increments(tree, dM):
    cond_var = tree.to_children(tree._child_sum(tree.p_cond * dM * dM))
    br = np.zeros(tree.n_nodes)
    for v in range(1, tree.n_nodes):
        br[v] = br[tree.parent[v]] + cond_var[v]
    return br


def predictable_bracket(tree: EventTree, M, tol: float = VERIFY_TOL) -> TreeProcess:
    """``<M,M>_k = sum_{j<=k} E[(dM_j)^2 | F_{j-1}]`` for a martingale ``M``."""
    m = as_values(M)
    _require_finite(m)
    res = martingale_residual(tree, m)
    if res > tol * max(1.0, float(np.max(np.abs(m)))):
        raise TreeError(f"input is not a martingale (max residual {res:.3e})")
    dM = np.zeros(tree.n_nodes)
    dM[1:] = m[1:] - m[tree.parent[1:]]
    return TreeProcess(_bracket_from_increments(tree, dM), "predictable")


def n_functional(tree: EventTree, X) -> float:
    """Essential sup of the terminal predictable bracket of the martingale part."""
    br = doob_decompose(tree, X).bracket.values
    return float(np.max(br[tree.level_slice(tree.K)]))


def multiplicative_decompose(tree: EventTree, X) -> tuple[TreeProcess, TreeProcess]:
    """Factor a positive process as martingale times predictable: ``X = Qhat * beta``."""
    x = as_values(X)
    _require_finite(x)
    if np.any(x <= 0):
        i = int(np.nonzero(x <= 0)[0][0])
        raise TreeError(f"node {tree.ids[i]}: process must be strictly positive, got {x[i]!r}")
    ratio = tree.to_children(tree.step_expectation(x) / x)
    beta = np.ones(tree.n_nodes)
    for v in range(1, tree.n_nodes):
        beta[v] = beta[tree.parent[v]] * ratio[v]
    return TreeProcess(x / beta), TreeProcess(beta, "predictable")


def change_of_measure(tree: EventTree, Z, tol: float = VERIFY_TOL) -> EventTree:
    """Reweight conditional probabilities by a positive density martingale ``Z``."""
    z = as_values(Z)
    _require_finite(z)
    if np.any(z <= 0):
        i = int(np.nonzero(z <= 0)[0][0])
        raise TreeError(f"node {tree.ids[i]}: density must be strictly positive")
    res = martingale_residual(tree, z)
    if res > tol * max(1.0, float(np.max(z))):
        raise TreeError(f"density is not a martingale (max residual {res:.3e})")
    p = tree.p_cond.copy()
    p[1:] = tree.p_cond[1:] * z[1:] / z[tree.parent[1:]]
    sums = tree._child_sum(p)
    p[1:] = p[1:] / sums[tree.parent[1:]]
    return tree.with_probs(p)


# --------------------------------------------------------------------------
# generators


def _grid_from_spec(spec: dict, K: int) -> TimeGrid:
    if "times" in spec:
        grid = TimeGrid(spec["times"])
        if grid.K != K:
            raise TreeError(f"times: length {grid.K + 1} inconsistent with K={K}")
        return grid
    return TimeGrid.uniform(K, float(spec.get("T", 1.0)))


def _random_probs(rng, m: int) -> np.ndarray:
    # Mixed with the uniform law so that no branch is vanishingly unlikely.
    p = 0.5 * rng.dirichlet(np.ones(m)) + 0.5 / m
    return p / p.sum()


def build_tree(spec: dict) -> EventTree:
    """Build a tree from a generator description.

    Generators
    ----------
    ``uniform``: ``K``, ``branching`` (int or per-level list), optional ``probs``
        (one list used at every node, or per level); without ``probs`` the
        conditional probabilities are drawn from ``seed``.
    ``markov``: ``K``, ``transition`` matrix (or ``n_states`` and ``seed`` for a
        random one), ``initial`` state.  One child per reachable next state.
    ``explicit``: ``nodes`` list of ``{id, level, parent, p_cond}``.

    Every generator takes ``times`` or ``T`` for the grid.
    """
    gen = spec.get("generator", "uniform")
    if gen == "uniform":
        return _build_uniform(spec)
    if gen == "markov":
        return _build_markov(spec)
    if gen == "explicit":
        return tree_from_dict(spec)
    raise TreeError(f"generator: unknown generator {gen!r}")


def _build_uniform(spec: dict) -> EventTree:
    K = int(spec.get("K", 0))
    if K < 1:
        raise TreeError("K: must be >= 1")
    br = spec.get("branching", 2)
    branching = [int(br)] * K if np.isscalar(br) else [int(b) for b in br]
    if len(branching) != K:
        raise TreeError("branching: per-level list must have K entries")
    if any(b < 1 for b in branching):
        raise TreeError("branching: must be >= 1 at every level")
    probs = spec.get("probs")
    per_level = None
    if probs is not None:
        probs = [list(map(float, p)) for p in probs] if np.ndim(probs) == 2 else \
            [list(map(float, probs))] * K
        if len(probs) != K:
            raise TreeError("probs: per-level list must have K entries")
        for k, (p, b) in enumerate(zip(probs, branching)):
            if len(p) != b:
                raise TreeError(f"probs[{k}]: expected {b} entries")
            if min(p) <= 0:
                raise TreeError(f"probs[{k}]: probabilities must be > 0")
            if abs(sum(p) - 1.0) > PROB_TOL * 10:
                raise TreeError(f"probs[{k}]: must sum to 1, got {sum(p)!r}")
        per_level = [np.asarray(p) / np.sum(p) for p in probs]
    rng = np.random.default_rng(spec.get("seed", 0))

    parent, p_cond = [-1], [1.0]
    frontier = [0]
    for k in range(K):
        nxt = []
        for u in frontier:
            m = branching[k]
            p = per_level[k] if per_level is not None else (
                np.ones(1) if m == 1 else _random_probs(rng, m))
            for j in range(m):
                parent.append(u)
                p_cond.append(float(p[j]))
                nxt.append(len(parent) - 1)
        frontier = nxt
    return EventTree(_grid_from_spec(spec, K), parent, p_cond)


def _build_markov(spec: dict) -> EventTree:
    K = int(spec.get("K", 0))
    if K < 1:
        raise TreeError("K: must be >= 1")
    if "transition" in spec:
        P = np.asarray(spec["transition"], dtype=float)
    else:
        n_states = int(spec.get("n_states", 2))
        rng = np.random.default_rng(spec.get("seed", 0))
        P = np.stack([_random_probs(rng, n_states) for _ in range(n_states)])
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise TreeError("transition: must be a square matrix")
    if np.any(P < 0):
        raise TreeError("transition: entries must be >= 0")
    rows = P.sum(axis=1)
    if np.any(np.abs(rows - 1) > PROB_TOL * 10):
        raise TreeError(f"transition: row {int(np.argmax(np.abs(rows - 1)))} does not sum to 1")
    s0 = int(spec.get("initial", 0))
    parent, p_cond, state = [-1], [1.0], [s0]
    frontier = [0]
    for _ in range(K):
        nxt = []
        for u in frontier:
            row = P[state[u]]
            nz = np.nonzero(row > 0)[0]
            for j in nz:
                parent.append(u)
                p_cond.append(float(row[j] / row[nz].sum()))
                state.append(int(j))
                nxt.append(len(parent) - 1)
        frontier = nxt
    return EventTree(_grid_from_spec(spec, K), parent, p_cond, state=state)


# --------------------------------------------------------------------------
# serialization


def tree_to_dict(tree: EventTree) -> dict[str, Any]:
    nodes = []
    for v in range(tree.n_nodes):
        nodes.append({
            "id": tree.ids[v],
            "level": int(tree.level[v]),
            "parent": None if v == 0 else tree.ids[tree.parent[v]],
            "p_cond": float(tree.p_cond[v]),
        })
        if tree.state is not None:
            nodes[-1]["state"] = int(tree.state[v])
    return {"generator": "explicit", "grid": {"times": [float(t) for t in tree.grid.times]},
            "nodes": nodes}


def tree_from_dict(spec: dict) -> EventTree:
    """Inverse of :func:`tree_to_dict`; nodes may be listed in any order."""
    times = spec.get("grid", {}).get("times", spec.get("times"))
    if times is None:
        raise TreeError("grid.times: missing")
    grid = TimeGrid(times)
    raw = spec.get("nodes")
    if not raw:
        raise TreeError("nodes: empty node list")
    by_id = {}
    for i, nd in enumerate(raw):
        if "id" not in nd:
            raise TreeError(f"nodes[{i}]: missing id")
        if nd["id"] in by_id:
            raise TreeError(f"nodes[{i}]: duplicate id {nd['id']!r}")
        by_id[nd["id"]] = nd
    roots = [nd["id"] for nd in raw if nd.get("parent") is None]
    if len(roots) != 1:
        raise TreeError(f"nodes: expected exactly one root, found {len(roots)}")
    kids: dict[Any, list] = {k: [] for k in by_id}
    for nd in raw:
        if nd.get("parent") is not None:
            if nd["parent"] not in by_id:
                raise TreeError(f"node {nd['id']!r}: unknown parent {nd['parent']!r}")
            kids[nd["parent"]].append(nd["id"])
    # breadth-first keeps (level, parent) order and the listed child order
    order, pos = [roots[0]], {roots[0]: 0}
    i = 0
    while i < len(order):
        for c in kids[order[i]]:
            pos[c] = len(order)
            order.append(c)
        i += 1
    if len(order) != len(raw):
        raise TreeError("nodes: not all nodes are reachable from the root")
    parent = [-1] + [pos[by_id[c]["parent"]] for c in order[1:]]
    p_cond = [1.0] + [float(by_id[c].get("p_cond", np.nan)) for c in order[1:]]
    for c in order:
        lv = by_id[c].get("level")
        if lv is not None and lv != _depth(by_id, c):
            raise TreeError(f"node {c!r}: level {lv} inconsistent with its ancestry")
    state = None
    if all("state" in by_id[c] for c in order):
        state = [by_id[c]["state"] for c in order]
    return EventTree(grid, parent, p_cond, ids=order, state=state)


def _depth(by_id, c):
    d = 0
    while by_id[c].get("parent") is not None:
        c = by_id[c]["parent"]
        d += 1
    return d


def dump_tree(tree: EventTree) -> str:
    return json.dumps(tree_to_dict(tree), indent=1)


def load_tree(text: str) -> EventTree:
    return tree_from_dict(json.loads(text))
