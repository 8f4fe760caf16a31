"""Utility families, inverse marginal utilities and regularity diagnostics.

All families are discounted: ``U(t, x) = exp(-beta t) u(x)``, so
``U_x(t, x) = exp(-beta t) u'(x)`` and ``I(t, y) = i(y exp(beta t))`` where
``i`` inverts ``u'``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.interpolate import PchipInterpolator

from .lattice import EventTree, TreeProcess, as_values, n_functional

NEG_INF = -math.inf


class UtilityError(ValueError):
    pass


@dataclass(frozen=True)
class UtilitySpec:
    """One agent's utility.

    ``family`` is ``"log"``, ``"power"`` (``u(x) = x**p / p``) or
    ``"tabulated"``.  A tabulated utility is given by its inverse marginal
    ``i`` on a log-spaced ``table = {"y": [...], "I": [...]}``; it is
    interpolated by a monotone cubic in log-log coordinates and extended by
    power tails.
    """

    family: str = "log"
    p: float | None = None
    beta: float = 0.0
    table: dict | None = None
    x_min: float | None = None
    _tab: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.beta < 0:
            raise UtilityError("beta: impatience must be >= 0")
        if self.family == "power":
            if self.p is None or not (self.p < 1) or self.p == 0:
                raise UtilityError("p: power family needs p in (-inf, 1) without 0")
        elif self.family == "tabulated":
            if not self.table:
                raise UtilityError("table: tabulated family needs an inverse-marginal table")
            object.__setattr__(self, "_tab", _Tabulated(self.table, self.x_min))
        elif self.family != "log":
            raise UtilityError(f"family: unknown utility family {self.family!r}")

    # the undiscounted kernel --------------------------------------------
    def _i(self, z):
        if self.family == "log":
            return 1.0 / z
        if self.family == "power":
            return z ** (1.0 / (self.p - 1.0))
        return self._tab.i(z)

    def _di(self, z):
        if self.family == "log":
            return -1.0 / (z * z)
        if self.family == "power":
            a = 1.0 / (self.p - 1.0)
            return a * z ** (a - 1.0)
        return self._tab.di(z)

    def _u(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            if self.family == "log":
                return np.log(x)
            if self.family == "power":
                return x ** self.p / self.p
        return self._tab.u(x)

    def _du(self, x):
        if self.family == "log":
            return 1.0 / x
        if self.family == "power":
            return x ** (self.p - 1.0)
        return self._tab.du(x)

    @property
    def unbounded_below(self) -> bool:
        if self.family == "log":
            return True
        if self.family == "power":
            return self.p < 0
        return self._tab.unbounded_below

    # discounted quantities -------------------------------------------------
    def U(self, t, x):
        return np.exp(-self.beta * np.asarray(t, dtype=float)) * self._u(x)

    def U_x(self, t, x):
        return np.exp(-self.beta * np.asarray(t, dtype=float)) * self._du(np.asarray(x, float))

    def I(self, t, y):
        return self._i(np.asarray(y, float) * np.exp(self.beta * np.asarray(t, dtype=float)))

    def I_y(self, t, y):
        g = np.exp(self.beta * np.asarray(t, dtype=float))
        return g * self._di(np.asarray(y, float) * g)


class _Tabulated:
    """Monotone-cubic interpolation of ``log i`` against ``log y``."""

    def __init__(self, table, x_min):
        y = np.asarray(table["y"], dtype=float)
        iv = np.asarray(table["I"], dtype=float)
        if y.size < 3 or y.shape != iv.shape:
            raise UtilityError("table: need >= 3 matching (y, I) samples")
        if np.any(y <= 0) or np.any(iv <= 0):
            raise UtilityError("table: y and I samples must be positive")
        if np.any(np.diff(y) <= 0):
            raise UtilityError("table.y: must be strictly increasing")
        if np.any(np.diff(iv) >= 0):
            raise UtilityError("table.I: inverse marginal must be strictly decreasing")
        self.ly = np.log(y)
        self.li = np.log(iv)
        self.f = PchipInterpolator(self.ly, self.li, extrapolate=False)
        self.df = self.f.derivative()
        self.s_lo = float(self.df(self.ly[0]))
        self.s_hi = float(self.df(self.ly[-1]))
        if not (self.s_lo < 0 and self.s_hi < 0):
            raise UtilityError("table: end slopes must be negative")
        self.x_min = float(np.exp(self.li[-1]) if x_min is None else x_min)
        if self.x_min <= 0:
            raise UtilityError("x_min: must be > 0")
        # u'(x) ~ x^(p-1) near 0 with 1/(p-1) = s_hi; integrable at 0 iff p > 0
        self.unbounded_below = not (self.s_hi < -1.0)

    def _li(self, lz):
        lz = np.asarray(lz, dtype=float)
        out = self.f(np.clip(lz, self.ly[0], self.ly[-1]))
        out = np.where(lz < self.ly[0], self.li[0] + self.s_lo * (lz - self.ly[0]), out)
        return np.where(lz > self.ly[-1], self.li[-1] + self.s_hi * (lz - self.ly[-1]), out)

    def _dli(self, lz):
        lz = np.asarray(lz, dtype=float)
        out = self.df(np.clip(lz, self.ly[0], self.ly[-1]))
        out = np.where(lz < self.ly[0], self.s_lo, out)
        return np.where(lz > self.ly[-1], self.s_hi, out)

    def i(self, z):
        return np.exp(self._li(np.log(z)))

    def di(self, z):
        z = np.asarray(z, dtype=float)
        return self.i(z) * self._dli(np.log(z)) / z

    def du(self, x):
        """Invert ``i`` by bisection in log-y (the interpolant is monotone)."""
        lx = np.log(np.asarray(x, dtype=float))
        lo = np.minimum(self.ly[0], self.ly[0] + (lx - self.li[0]) / self.s_lo) - 1.0
        hi = np.maximum(self.ly[-1], self.ly[-1] + (lx - self.li[-1]) / self.s_hi) + 1.0
        lo, hi = np.broadcast_arrays(lo, hi)
        lo, hi = lo.astype(float).copy(), hi.astype(float).copy()
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if np.all((mid == lo) | (mid == hi)):
                break
            above = self._li(mid) > lx
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        return np.exp(0.5 * (lo + hi))

    # u(x) = x y - F(log y) + const with y = u'(x) and F(s) = int^s i(e^r) e^r dr;
    # F is exact on each interpolation interval (Gauss-Legendre) and in the tails.
    _GL = np.polynomial.legendre.leggauss(24)

    def _seg(self, a, b):
        a, b = np.asarray(a, float), np.asarray(b, float)
        xg, wg = self._GL
        r = a[..., None] + (b - a)[..., None] * (xg + 1.0) / 2.0
        return 0.5 * (b - a) * np.sum(wg * np.exp(self._li(r) + r), axis=-1)

    def _tail(self, c0, r0, k, a, b):
        # int_a^b exp(c0 + k (r - r0) + r) dr
        if abs(1.0 + k) < 1e-14:
            return (b - a) * np.exp(c0 + r0)
        g = 1.0 + k
        return (np.exp(c0 + r0 + g * (b - r0)) - np.exp(c0 + r0 + g * (a - r0))) / g

    def _F(self, s):
        s = np.asarray(s, dtype=float)
        if not hasattr(self, "_knots"):
            self._knots = np.r_[0.0, np.cumsum(self._seg(self.ly[:-1], self.ly[1:]))]
        y0, yn = self.ly[0], self.ly[-1]
        k = np.clip(np.searchsorted(self.ly, s, side="right") - 1, 0, self.ly.size - 2)
        inside = self._knots[k] + self._seg(self.ly[k], np.clip(s, y0, yn))
        below = -self._tail(self.li[0], y0, self.s_lo, np.minimum(s, y0), y0)
        above = self._knots[-1] + self._tail(self.li[-1], yn, self.s_hi, yn, np.maximum(s, yn))
        return np.where(s < y0, below, np.where(s > yn, above, inside))

    def _raw_u(self, x):
        y = self.du(x)
        return x * y - self._F(np.log(y))

    def u(self, x):
        x = np.asarray(x, dtype=float)
        if not hasattr(self, "_u0"):
            self._u0 = float(self._raw_u(np.array(self.x_min)))
        pos = x > 0
        out = np.empty_like(x)
        out[pos] = self._raw_u(x[pos]) - self._u0
        out[~pos] = NEG_INF if self.unbounded_below else self._u_zero()
        return out if out.ndim else float(out)

    def _u_zero(self):
        # as x -> 0: x y -> 0 and F converges when the upper tail has slope < -1
        yn = self.ly[-1]
        tail = -np.exp(self.li[-1] + yn) / (1.0 + self.s_hi)
        return float(-(self._F(yn) + tail) - self._u0)


def eval_inverse_marginal(u: UtilitySpec, t: float, y: float) -> float:
    if not y > 0:
        raise UtilityError(f"y must be > 0, got {y!r}")
    return float(u.I(t, y))


def utility_functional(tree: EventTree, u: UtilitySpec, c) -> float:
    """``E[ int U(t, c_t) dkappa_t ]``; ``-inf`` when infinite below."""
    c = as_values(c)
    if np.any(c < 0):
        raise UtilityError("consumption must be nonnegative")
    if np.any(c == 0) and u.unbounded_below:
        return NEG_INF
    vals = u.U(tree.node_times, c)
    return float(np.dot(tree.prob * tree.node_weights, vals))


def dual_value(u: UtilitySpec, t, lam, xi=math.inf):
    """``V(t, lam; xi) = sup_{0 <= x < xi} U(t, x) - lam x`` (vectorised)."""
    lam = np.asarray(lam, dtype=float)
    if np.any(~(lam > 0)):
        raise UtilityError("lam must be > 0")
    xi = np.broadcast_to(np.asarray(xi, dtype=float), lam.shape)
    t = np.broadcast_to(np.asarray(t, dtype=float), lam.shape)
    finite = np.isfinite(xi)
    mux = np.zeros_like(lam)
    mux[finite] = u.U_x(t[finite], xi[finite])
    free = lam > mux
    out = np.empty_like(lam)
    x = u.I(t[free], lam[free])
    out[free] = u.U(t[free], x) - lam[free] * x
    cap = ~free
    out[cap] = u.U(t[cap], xi[cap]) - lam[cap] * xi[cap]
    return out if out.ndim else float(out)


def convexity_norm(x, f, df=None) -> float:
    """``|f(x1)| + |f'(x1)| + TV(f')`` on the sample grid ``x``.

    ``df`` are derivative samples; when omitted they are taken by central
    differences (one-sided at the ends).
    """
    x = np.asarray(x, dtype=float)
    f = np.asarray(f, dtype=float)
    if x.size < 2:
        raise ValueError("grid needs at least two points")
    if np.any(np.diff(x) <= 0):
        raise ValueError("grid must be sorted strictly increasing")
    d = np.gradient(f, x) if df is None else np.asarray(df, dtype=float)
    return float(abs(f[0]) + abs(d[0]) + np.sum(np.abs(np.diff(d))))


# --------------------------------------------------------------------------
# agents


@dataclass
class AgentSpec:
    utility: UtilitySpec
    endowment: TreeProcess
    cap: TreeProcess | None = None
    epsilon: float | None = None

    def __post_init__(self):
        if not isinstance(self.endowment, TreeProcess):
            self.endowment = TreeProcess(self.endowment)
        if self.cap is not None and not isinstance(self.cap, TreeProcess):
            self.cap = TreeProcess(self.cap)
        e = self.endowment.values
        if self.epsilon is None:
            self.epsilon = float(min(e.min(), 1.0 / e.max()))

    @property
    def e(self) -> np.ndarray:
        return self.endowment.values

    @property
    def gamma(self) -> np.ndarray:
        if self.cap is None:
            return np.full_like(self.e, np.inf)
        return self.cap.values

    def problems(self, tree: EventTree) -> list[str]:
        """Violations of the endowment and cap invariants (empty when valid)."""
        out = []
        e, g, eps = self.e, self.gamma, self.epsilon
        if e.shape != (tree.n_nodes,):
            return [f"endowment has {e.size} values for {tree.n_nodes} nodes"]
        slack = 1e-12
        if np.any(e < eps * (1 - slack)) or np.any(e * eps > 1 + slack):
            out.append("endowment outside [epsilon, 1/epsilon]")
        bad = np.nonzero(~(g > e))[0]
        if bad.size:
            out.append(f"cap not above endowment at node {tree.ids[bad[0]]}")
        leaf = tree.level_slice(tree.K)
        if np.any(np.isfinite(g[leaf])):
            out.append("cap must be +inf at the terminal level")
        return out


def build_endowment(tree: EventTree, spec: dict) -> TreeProcess:
    """Endowment process from a generator block.

    ``constant`` (``value``), ``shock`` (``e0``, ``sigma``, ``lo``, ``hi``,
    ``seed``: clipped i.i.d. log-normal multiplicative shocks), ``markov``
    (``values`` per chain state), ``explicit`` (``values`` per node).
    """
    gen = spec.get("generator", "explicit" if "values" in spec else "constant")
    n = tree.n_nodes
    if gen == "constant":
        return TreeProcess(np.full(n, float(spec.get("value", 1.0))))
    if gen == "shock":
        rng = np.random.default_rng(spec.get("seed", 0))
        lo, hi = float(spec.get("lo", 0.5)), float(spec.get("hi", 2.0))
        sigma = float(spec.get("sigma", 0.2))
        z = rng.standard_normal(n)
        e = np.empty(n)
        e[0] = float(spec.get("e0", 1.0))
        for v in range(1, n):
            e[v] = min(hi, max(lo, e[tree.parent[v]] * math.exp(sigma * z[v])))
        return TreeProcess(e)
    if gen == "markov":
        if tree.state is None:
            raise ValueError("endowment: markov generator needs a markov tree")
        vals = np.asarray(spec["values"], dtype=float)
        return TreeProcess(vals[tree.state])
    if gen == "explicit":
        vals = np.asarray(spec["values"], dtype=float)
        if vals.shape != (n,):
            raise ValueError(f"endowment.values: expected {n} values")
        return TreeProcess(vals)
    raise ValueError(f"endowment.generator: unknown generator {gen!r}")


def build_cap(tree: EventTree, e: TreeProcess, spec: dict | None) -> TreeProcess:
    """Withdrawal cap; every kind is forced to ``+inf`` at the terminal level."""
    spec = spec or {"kind": "none"}
    kind = spec.get("kind", "none")
    ev = as_values(e)
    if kind == "none":
        g = np.full(tree.n_nodes, np.inf)
    elif kind == "proportional":
        g = float(spec["gamma"]) * ev
    elif kind == "overdraft":
        g = ev + float(spec["delta"])
    elif kind == "explicit":
        g = np.array([np.inf if v is None else float(v) for v in spec["values"]])
    else:
        raise ValueError(f"cap.kind: unknown cap kind {kind!r}")
    g = np.array(g, dtype=float)
    g[tree.level_slice(tree.K)] = np.inf
    return TreeProcess(g, "optional")


# --------------------------------------------------------------------------
# regularity report


@dataclass
class RegularityProbe:
    caps_C: tuple = (1.0, 2.0, 5.0)
    y_hi: float = 1e12
    y_lo: float = 1e-12
    inada_hi_max: float = 1e-3
    inada_lo_min: float = 1e3
    y_range: tuple = (0.1, 10.0)
    y_points: int = 201


def _item(name, value, ok, detail=""):
    return {"check": name, "value": value, "pass": bool(ok), "detail": detail}


def convexity_lipschitz_constant(u: UtilitySpec, times, y_range=(0.1, 10.0), n=201) -> float:
    """``max_{s<t} ||I(t,.) - I(s,.)|| / |t - s|`` over the given time points."""
    y = np.linspace(*y_range, n)
    best = 0.0
    for s, t in combinations(np.asarray(times, dtype=float), 2):
        f = u.I(t, y) - u.I(s, y)
        df = u.I_y(t, y) - u.I_y(s, y)
        best = max(best, convexity_norm(y, f, df) / abs(t - s))
    return best


def regularity_report(tree: EventTree, agents, probe: RegularityProbe | None = None) -> dict:
    """Check the endowment, cap and utility regularity conditions numerically."""
    probe = probe or RegularityProbe()
    times = tree.grid.times
    out = []
    for i, a in enumerate(agents):
        e, g = a.e, a.gamma
        items = [
            _item("endowment_bounds", [float(e.min()), float(e.max())],
                  e.min() >= a.epsilon * (1 - 1e-12) and e.max() * a.epsilon <= 1 + 1e-12,
                  f"epsilon={a.epsilon!r}"),
            _item("endowment_N", n_functional(tree, e), np.isfinite(n_functional(tree, e))),
        ]
        bad = np.nonzero(~(g > e))[0]
        items.append(_item("cap_above_endowment", float(np.min(g - e)), bad.size == 0,
                           "" if bad.size == 0 else f"violated at node {tree.ids[bad[0]]}"))
        leaf = tree.level_slice(tree.K)
        items.append(_item("cap_terminal_infinite", bool(np.all(np.isinf(g[leaf]))),
                           np.all(np.isinf(g[leaf]))))
        for C in probe.caps_C:
            nv = n_functional(tree, np.minimum(g, C))
            items.append(_item(f"cap_N_min_{C:g}", nv, np.isfinite(nv)))
        hi = float(np.max(a.utility.I(times, probe.y_hi)))
        lo = float(np.min(a.utility.I(times, probe.y_lo)))
        items.append(_item("inada_high", hi, hi < probe.inada_hi_max,
                           f"max_t I(t,{probe.y_hi:g}) < {probe.inada_hi_max:g}"))
        items.append(_item("inada_low", lo, lo > probe.inada_lo_min,
                           f"min_t I(t,{probe.y_lo:g}) > {probe.inada_lo_min:g}"))
        lip = convexity_lipschitz_constant(a.utility, times, probe.y_range, probe.y_points)
        items.append(_item("convexity_lipschitz", lip, np.isfinite(lip),
                           f"y in [{probe.y_range[0]:g}, {probe.y_range[1]:g}]"))
        items.append(_item("utility_bounded_in_t", None, True, "not verified"))
        out.append({"agent": i, "items": items,
                    "pass": all(it["pass"] for it in items)})
    return {"agents": out, "pass": all(a["pass"] for a in out)}
