"""Decompositions of functions of time and space and of processes built from them.

Grid conventions: a :class:`GridFunction` holds ``values[j, m] = f(t_j, x_m)``.
Derivatives in ``x`` are either supplied analytically or estimated (central
differences for splitting, right difference quotients for integrands).
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .lattice import EventTree, TreeError, TreeProcess, as_values, doob_decompose, n_functional


@dataclass
class GridFunction:
    t: np.ndarray
    x: np.ndarray
    values: np.ndarray
    dx: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.atleast_1d(np.asarray(self.t, dtype=float))
        self.x = np.asarray(self.x, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.dx is not None:
            self.dx = np.atleast_2d(np.asarray(self.dx, dtype=float))
        if np.any(np.diff(self.t) <= 0) or np.any(np.diff(self.x) <= 0):
            raise ValueError("grids must be strictly increasing")
        if self.values.shape != (self.t.size, self.x.size):
            raise ValueError(f"values shape {self.values.shape} does not match grids")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values must be finite")

    @classmethod
    def from_callable(cls, f, t, x, fx=None) -> "GridFunction":
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = np.asarray(x, dtype=float)
        T, X = np.meshgrid(t, x, indexing="ij")
        return cls(t, x, f(T, X), None if fx is None else fx(T, X))

    @property
    def analytic(self) -> bool:
        return self.dx is not None

    def derivative(self) -> np.ndarray:
        if self.dx is not None:
            return self.dx
        return np.gradient(self.values, self.x, axis=1)

    def _time_index(self, t):
        j = int(np.searchsorted(self.t, t, side="right")) - 1
        return min(max(j, 0), self.t.size - 1)

    def __call__(self, t, x):
        return float(np.interp(x, self.x, self.values[self._time_index(t)]))

    def right_derivative(self, t, x):
        """Right difference quotient on the space grid (analytic when available)."""
        j = self._time_index(t)
        if self.dx is not None:
            return float(np.interp(x, self.x, self.dx[j]))
        m = int(np.searchsorted(self.x, x, side="right")) - 1
        m = min(max(m, 0), self.x.size - 2)
        return float((self.values[j, m + 1] - self.values[j, m]) / (self.x[m + 1] - self.x[m]))


@dataclass
class AnalyticFunction:
    """``f(t, x)`` with its space derivative; both vectorised."""
    f: Callable
    fx: Callable

    def __call__(self, t, x):
        return self.f(t, x)

    def right_derivative(self, t, x):
        return self.fx(t, x)


# --------------------------------------------------------------------------
# splitting


@dataclass
class ConvexSplit:
    f1: GridFunction
    f2: GridFunction
    up: np.ndarray
    down: np.ndarray
    warnings: list = field(default_factory=list)

    def norm(self, j: int = 0) -> float:
        """Convexity norm of time slice ``j`` read off the split."""
        f = self.f1.values[j] - self.f2.values[j]
        d0 = self.up[j, 0] - self.down[j, 0]
        tv = (self.up[j, -1] - self.up[j, 0]) + (self.down[j, -1] - self.down[j, 0])
        return float(abs(f[0]) + abs(d0) + tv)


def jordan(d: np.ndarray):
    """Running split ``d = up - down`` with both parts non-negative and non-decreasing."""
    inc = np.diff(d, axis=-1)
    up0 = np.maximum(d[..., :1], 0.0)
    dn0 = np.maximum(-d[..., :1], 0.0)
    up = np.concatenate([up0, up0 + np.cumsum(np.maximum(inc, 0.0), axis=-1)], axis=-1)
    dn = np.concatenate([dn0, dn0 + np.cumsum(np.maximum(-inc, 0.0), axis=-1)], axis=-1)
    return up, dn


def convexity_split(f: GridFunction) -> ConvexSplit:
    """``f = f1 - f2`` with ``f1, f2`` convex in ``x`` on every time slice."""
    d = f.derivative()
    notes = []
    if not f.analytic:
        inc = np.diff(d, axis=1)
        flips = np.sum(np.abs(np.diff(np.sign(inc), axis=1)) > 1, axis=1)
        if np.any(flips > inc.shape[1] // 4):
            notes.append("derivative direction flips on many adjacent cells; "
                         "grid may be too coarse to resolve its turning points")
            warnings.warn(notes[-1])
    up, dn = jordan(d)
    f1 = f.values[:, :1] + cumulative_trapezoid(up, f.x, axis=1, initial=0.0)
    f2 = cumulative_trapezoid(dn, f.x, axis=1, initial=0.0)
    return ConvexSplit(GridFunction(f.t, f.x, f1, up), GridFunction(f.t, f.x, f2, dn),
                       up, dn, notes)


@dataclass
class InverseSplit:
    y: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    residual: float


def inverse_split(f: GridFunction, y, g) -> InverseSplit:
    """Convex split of the x-inverse ``g`` of an increasing ``f``.

    ``g[j, :]`` solves ``f(t_j, g) = y``.  The Stieltjes sums pair each
    increment of ``h^i = f^i_x(t, g(t, .))`` with ``g_y`` at both interval
    endpoints, which telescopes the reconstruction exactly.
    """
    y = np.asarray(y, dtype=float)
    g = np.atleast_2d(np.asarray(g, dtype=float))
    if g.shape != (f.t.size, y.size):
        raise ValueError("g must have one row per time slice and one column per y")
    if np.any(f.derivative() <= 0):
        raise ValueError("f must be strictly increasing in x")
    d = f.derivative()
    for j in range(f.t.size):
        back = np.interp(g[j], f.x, f.values[j])
        err = np.max(np.abs(back - y))
        # linear interpolation of f contributes up to h^2 max|f_xx| / 8
        curv = np.max(np.abs(np.diff(d[j]) / np.diff(f.x)))
        if err > 1e-8 * (1.0 + np.max(np.abs(y))) + 0.13 * _h(f.x) ** 2 * curv:
            raise ValueError(f"g is not the inverse of f on slice {j} (error {err:.2e})")
    sp = convexity_split(f)
    g1 = np.empty_like(g)
    g2 = np.empty_like(g)
    for j in range(f.t.size):
        h1 = np.interp(g[j], f.x, sp.up[j])
        h2 = np.interp(g[j], f.x, sp.down[j])
        gy = 1.0 / (h1 - h2)
        wgt = gy[:-1] * gy[1:]
        in1 = np.r_[0.0, np.cumsum(wgt * np.diff(h1))]
        in2 = np.r_[0.0, np.cumsum(wgt * np.diff(h2))]
        g1[j] = g[j, 0] + gy[0] * (y - y[0]) + cumulative_trapezoid(in2, y, initial=0.0)
        g2[j] = cumulative_trapezoid(in1, y, initial=0.0)
    return InverseSplit(y, g1, g2, float(np.max(np.abs(g1 - g2 - g))))


def _h(x):
    return float(np.max(np.diff(x)))


# --------------------------------------------------------------------------
# processes


@dataclass
class SemifunDecomposition:
    martingale: TreeProcess
    drift: TreeProcess
    integrand: np.ndarray


def semifun_decompose(tree: EventTree, f, X) -> SemifunDecomposition:
    """``f(t, X_t) = f(0, X_0) + Mtilde + Atilde`` with ``dMtilde = f_{x+}(X_-) dM``."""
    x = as_values(X)
    if isinstance(f, GridFunction) and (x.min() < f.x[0] or x.max() > f.x[-1]):
        raise TreeError("process leaves the space grid of f")
    M = doob_decompose(tree, x).martingale_part.values
    t = tree.node_times
    N = tree.n_nodes
    fx_prev = np.zeros(N)
    fvals = np.empty(N)
    if isinstance(f, GridFunction):
        for v in range(N):
            fvals[v] = f(t[v], x[v])
        for v in range(1, N):
            u = tree.parent[v]
            fx_prev[v] = f.right_derivative(t[u], x[u])
    else:
        fvals = np.asarray(f(t, x), dtype=float) * np.ones(N)
        u = tree.parent[1:]
        fx_prev[1:] = f.right_derivative(t[u], x[u])
    dM = np.zeros(N)
    dM[1:] = M[1:] - M[tree.parent[1:]]
    Mt = np.zeros(N)
    inc = fx_prev * dM
    for v in range(1, N):
        Mt[v] = Mt[tree.parent[v]] + inc[v]
    At = fvals - fvals[0] - Mt
    return SemifunDecomposition(TreeProcess(Mt), TreeProcess(At), fx_prev)


def min_stability(tree: EventTree, X1, X2) -> dict:
    """Compare ``N(min(X1, X2))`` with ``N(X1) + N(X2)``."""
    a, b = as_values(X1), as_values(X2)
    n_min = n_functional(tree, np.minimum(a, b))
    n1, n2 = n_functional(tree, a), n_functional(tree, b)
    total = n1 + n2
    return {
        "N_min": n_min, "N_1": n1, "N_2": n2,
        "ratio": n_min / total if total > 0 else 0.0,
        "bound_factor_2": bool(n_min <= 2.0 * total + 1e-10),
        "bound_factor_1": bool(n_min <= total + 1e-10),
    }


# --------------------------------------------------------------------------
# CSV I/O: header row holds the x grid, first column the t grid


def write_grid_function(gf: GridFunction, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t\\x"] + [repr(float(v)) for v in gf.x])
        for j, tj in enumerate(gf.t):
            w.writerow([repr(float(tj))] + [repr(float(v)) for v in gf.values[j]])


def read_grid_function(path) -> GridFunction:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    x = [float(v) for v in rows[0][1:]]
    t = [float(r[0]) for r in rows[1:]]
    vals = [[float(v) for v in r[1:]] for r in rows[1:]]
    return GridFunction(t, x, vals)
