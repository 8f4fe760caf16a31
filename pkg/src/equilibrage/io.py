"""Artifact emission and reloading: JSON for structures, CSV and text for series.

Every writer is deterministic: keys are sorted, floats are written in their
shortest round-trip form and nothing depends on the clock or the filesystem.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path

import numpy as np

from .lattice import EventTree, tree_to_dict
from .marketize import MarketRealization
from .negishi import EquilibriumSolution

MANIFEST = "manifest.json"


def clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to their string names."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return obj


def _dumps(obj) -> str:
    return json.dumps(clean(obj), indent=1, sort_keys=True, allow_nan=False) + "\n"


def _floats(xs):
    return np.array([float(x) for x in xs])


def write_json(path, obj) -> None:
    Path(path).write_text(_dumps(obj))


# --------------------------------------------------------------------------
# equilibrium


def solution_to_dict(tree: EventTree, sol: EquilibriumSolution, seed: int = 0) -> dict:
    return {
        "seed": seed,
        "normalization": sol.normalization,
        "iterations": sol.iterations,
        "weights": sol.weights,
        "budget_residuals": sol.residuals,
        "residual_trace": sol.trace,
        "nodes": [str(i) for i in tree.ids],
        "Q": sol.Q,
        "allocations": sol.allocations,
    }


def solution_from_dict(obj: dict) -> EquilibriumSolution:
    return EquilibriumSolution(weights=_floats(obj["weights"]), Q=_floats(obj["Q"]),
                               allocations=np.array([_floats(r) for r in obj["allocations"]]),
                               residuals=_floats(obj["budget_residuals"]),
                               trace=list(obj.get("residual_trace", [])),
                               iterations=int(obj.get("iterations", 0)),
                               normalization=obj.get("normalization", "kappa_mass_one"))


# --------------------------------------------------------------------------
# market table: one row per node


def _market_columns(market: MarketRealization, d: int):
    n = market.n
    cols = ["node", "level", "parent", "t", "prob", "qhat_p_cond", "qhat_density",
            "beta", "B"]
    cols += [f"S_{j + 1}" for j in range(n)]
    for i in range(d):
        cols += [f"H_{i + 1}_{j + 1}" for j in range(n)]
        cols += [f"X_{i + 1}", f"Xtilde_{i + 1}"]
    return cols


def market_to_csv(tree: EventTree, market: MarketRealization) -> str:
    d = market.X.shape[0]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_market_columns(market, d))
    for v in range(tree.n_nodes):
        row = [tree.ids[v], int(tree.level[v]),
               "" if v == 0 else tree.ids[tree.parent[v]],
               repr(float(tree.node_times[v])), repr(float(tree.prob[v])),
               repr(float(market.qhat.p_cond[v])), repr(float(market.qhat_density[v])),
               repr(float(market.beta[v])), repr(float(market.B[v]))]
        row += [repr(float(x)) for x in market.S[v]]
        for i in range(d):
            row += [repr(float(x)) for x in market.H[i, v]]
            row += [repr(float(market.X[i, v])), repr(float(market.Xtilde[i, v]))]
        w.writerow(row)
    return buf.getvalue()


def market_from_csv(tree: EventTree, text: str, d: int) -> MarketRealization:
    """Rebuild a market dump; values are taken as written, nothing is recomputed."""
    rows = list(csv.reader(io.StringIO(text)))
    head, body = rows[0], rows[1:]
    if len(body) != tree.n_nodes:
        raise ValueError(f"market.csv: {len(body)} rows for {tree.n_nodes} nodes")
    col = {name: k for k, name in enumerate(head)}
    n = sum(1 for h in head if h.startswith("S_"))
    get = lambda name: np.array([float(r[col[name]]) for r in body])
    S = np.stack([get(f"S_{j + 1}") for j in range(n)], 1) if n else np.zeros((tree.n_nodes, 0))
    H = np.zeros((d, tree.n_nodes, n))
    for i in range(d):
        for j in range(n):
            H[i, :, j] = get(f"H_{i + 1}_{j + 1}")
    B = get("B")
    return MarketRealization(
        qhat=tree.with_probs(get("qhat_p_cond")),
        qhat_density=get("qhat_density"), beta=get("beta"), B=B,
        Y=S / B[:, None], S=S, H=H,
        X=np.stack([get(f"X_{i + 1}") for i in range(d)]),
        Xtilde=np.stack([get(f"Xtilde_{i + 1}") for i in range(d)]))


def market_summary(market: MarketRealization) -> dict:
    return {"n_assets": market.n, "clearing_mode": market.clearing_mode,
            "hedge_mean_correction": market.correction,
            "pricing_identity_error": market.pricing_identity_error}


# --------------------------------------------------------------------------
# plot data: two columns (t, value), one block per path separated by a blank line


def path_series(tree: EventTree, x) -> str:
    x = np.asarray(x, dtype=float)
    blocks = []
    for path in tree.paths():
        blocks.append("\n".join(f"{tree.node_times[v]!r} {float(x[v])!r}" for v in path))
    return "\n\n".join(blocks) + "\n"


def plot_files(tree: EventTree, solution, market: MarketRealization) -> dict[str, str]:
    out = {"plots/Q.txt": path_series(tree, solution.Q),
           "plots/B.txt": path_series(tree, market.B)}
    for j in range(market.n):
        out[f"plots/S_{j + 1}.txt"] = path_series(tree, market.S[:, j])
    for i in range(solution.allocations.shape[0]):
        out[f"plots/c_{i + 1}.txt"] = path_series(tree, solution.allocations[i])
        out[f"plots/X_{i + 1}.txt"] = path_series(tree, market.X[i])
    return out


# --------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir) -> dict:
    """List every artifact under ``out_dir`` (except the manifest) with its hash."""
    out_dir = Path(out_dir)
    files = sorted(p for p in out_dir.rglob("*") if p.is_file() and p.name != MANIFEST)
    manifest = {"files": [{"path": p.relative_to(out_dir).as_posix(), "sha256": _sha256(p),
                           "bytes": p.stat().st_size} for p in files]}
    write_json(out_dir / MANIFEST, manifest)
    return manifest


def emit_outputs(tree: EventTree, solution, market: MarketRealization, certificate=None,
                 out_dir=".", seed: int = 0, regularity=None, plots: bool = True) -> dict:
    """Write all artifacts and the manifest; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "tree.json", tree_to_dict(tree))
    write_json(out_dir / "equilibrium.json", solution_to_dict(tree, solution, seed))
    write_json(out_dir / "market.json", market_summary(market))
    (out_dir / "market.csv").write_text(market_to_csv(tree, market))
    if regularity is not None:
        write_json(out_dir / "regularity.json", regularity)
    if certificate is not None:
        write_json(out_dir / "certificate.json", certificate.as_dict())
    if plots:
        (out_dir / "plots").mkdir(exist_ok=True)
        for name, text in plot_files(tree, solution, market).items():
            (out_dir / name).write_text(text)
    return write_manifest(out_dir)
