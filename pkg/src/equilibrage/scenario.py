"""Scenario files: schema, parsing, seeded random scenarios and the canned demos."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .lattice import EventTree, TreeError, build_tree
from .negishi import SolverOptions
from .preferences import AgentSpec, UtilityError, UtilitySpec, build_cap, build_endowment

SCHEMA_VERSION = 1

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "type": "object",
    "required": ["schema", "tree", "agents"],
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "tree": {
            "type": "object",
            "required": ["generator"],
            "properties": {
                "generator": {"enum": ["uniform", "markov", "explicit"]},
                "K": {"type": "integer", "minimum": 1},
                "T": _pos,
                "times": {"type": "array", "items": _num, "minItems": 2},
                "seed": {"type": "integer", "minimum": 0},
                "branching": {"oneOf": [{"type": "integer", "minimum": 1},
                                        {"type": "array", "items": {"type": "integer",
                                                                    "minimum": 1}}]},
                "probs": {"type": "array"},
                "transition": {"type": "array", "items": {"type": "array", "items": _num}},
                "n_states": {"type": "integer", "minimum": 1},
                "initial": {"type": "integer", "minimum": 0},
                "grid": {"type": "object"},
                "nodes": {"type": "array", "items": {"type": "object", "required": ["id"]}},
            },
        },
        "agents": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["utility", "endowment"],
                "additionalProperties": False,
                "properties": {
                    "utility": {
                        "type": "object",
                        "required": ["family"],
                        "additionalProperties": False,
                        "properties": {
                            "family": {"enum": ["log", "power", "tabulated"]},
                            "p": {"type": "number", "exclusiveMaximum": 1},
                            "beta": {"type": "number", "minimum": 0},
                            "table": {"type": "object", "required": ["y", "I"]},
                            "x_min": _pos,
                        },
                    },
                    "endowment": {
                        "type": "object",
                        "properties": {
                            "generator": {"enum": ["constant", "shock", "markov", "explicit"]},
                            "value": _pos,
                            "e0": _pos,
                            "sigma": {"type": "number", "minimum": 0},
                            "lo": _pos,
                            "hi": _pos,
                            "seed": {"type": "integer", "minimum": 0},
                            "values": {"type": "array", "items": _pos},
                        },
                    },
                    "cap": {
                        "type": "object",
                        "required": ["kind"],
                        "properties": {
                            "kind": {"enum": ["none", "proportional", "overdraft", "explicit"]},
                            "gamma": {"type": "number", "exclusiveMinimum": 1},
                            "delta": _pos,
                            "values": {"type": "array",
                                       "items": {"type": ["number", "null"]}},
                        },
                        "allOf": [
                            {"if": {"properties": {"kind": {"const": "proportional"}}},
                             "then": {"required": ["gamma"]}},
                            {"if": {"properties": {"kind": {"const": "overdraft"}}},
                             "then": {"required": ["delta"]}},
                            {"if": {"properties": {"kind": {"const": "explicit"}}},
                             "then": {"required": ["values"]}},
                        ],
                    },
                },
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": _pos,
                "max_iters": {"type": "integer", "minimum": 0},
                "step0": _pos,
                "accelerate": {"type": "boolean"},
                "cross_check": {"type": "boolean"},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "deviations": {"type": "integer", "minimum": 0},
                "plots": {"type": "boolean"},
                "clearing_mode": {"enum": ["mean", "indicator"]},
            },
        },
    },
}


class ScenarioError(ValueError):
    """Input problem; ``kind`` is ``missing``, ``json``, ``schema`` or ``model``."""

    def __init__(self, kind: str, errors):
        self.kind = kind
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        super().__init__(f"{kind} error: " + "; ".join(self.errors))


@dataclass
class OutputOptions:
    deviations: int = 0
    plots: bool = True
    clearing_mode: str = "mean"


@dataclass
class Scenario:
    tree_spec: dict
    agent_specs: list
    solver: SolverOptions = field(default_factory=SolverOptions)
    output: OutputOptions = field(default_factory=OutputOptions)
    seed: int = 0
    name: str = "scenario"

    @property
    def d(self) -> int:
        return len(self.agent_specs)

    def with_seed(self, seed: int) -> "Scenario":
        out = copy.deepcopy(self)
        out.seed = int(seed)
        return out

    def build_tree(self) -> EventTree:
        spec = dict(self.tree_spec)
        if spec.get("generator", "uniform") != "explicit":
            spec.setdefault("seed", self.seed)
        return build_tree(spec)

    def build_agents(self, tree: EventTree) -> list[AgentSpec]:
        agents = []
        for i, a in enumerate(self.agent_specs):
            u = dict(a["utility"])
            util = UtilitySpec(family=u["family"], p=u.get("p"), beta=float(u.get("beta", 0.0)),
                               table=u.get("table"), x_min=u.get("x_min"))
            es = dict(a["endowment"])
            if es.get("generator") == "shock":
                es.setdefault("seed", self.seed + 1 + i)
            e = build_endowment(tree, es)
            agents.append(AgentSpec(util, e, build_cap(tree, e, a.get("cap"))))
        return agents

    def build(self):
        """Tree and agents, with model-level validation errors as :class:`ScenarioError`."""
        try:
            tree = self.build_tree()
        except (TreeError, KeyError, ValueError) as exc:
            raise ScenarioError("model", f"tree: {exc}") from exc
        try:
            agents = self.build_agents(tree)
        except (UtilityError, KeyError, ValueError) as exc:
            raise ScenarioError("model", f"agents: {exc}") from exc
        errs = [f"agents/{i}: {msg}" for i, a in enumerate(agents) for msg in a.problems(tree)]
        if errs:
            raise ScenarioError("model", errs)
        return tree, agents

    def to_dict(self) -> dict:
        s = self.solver
        return {
            "schema": SCHEMA_VERSION,
            "name": self.name,
            "seed": self.seed,
            "tree": copy.deepcopy(self.tree_spec),
            "agents": copy.deepcopy(self.agent_specs),
            "solver": {"tol": s.tol, "max_iters": s.max_iters, "step0": s.step0,
                       "accelerate": s.accelerate, "cross_check": s.cross_check},
            "output": {"deviations": self.output.deviations, "plots": self.output.plots,
                       "clearing_mode": self.output.clearing_mode},
        }


def _field_path(err) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def scenario_from_dict(raw: dict) -> Scenario:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errs = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errs:
        raise ScenarioError("schema", [f"{_field_path(e)}: {e.message}" for e in errs])
    sv = raw.get("solver", {})
    defaults = SolverOptions()
    solver = SolverOptions(tol=float(sv.get("tol", defaults.tol)),
                           max_iters=int(sv.get("max_iters", defaults.max_iters)),
                           step0=float(sv.get("step0", defaults.step0)),
                           accelerate=bool(sv.get("accelerate", False)),
                           cross_check=bool(sv.get("cross_check", False)))
    out = OutputOptions(**raw.get("output", {}))
    return Scenario(tree_spec=copy.deepcopy(raw["tree"]),
                    agent_specs=copy.deepcopy(raw["agents"]),
                    solver=solver, output=out, seed=int(raw.get("seed", 0)),
                    name=raw.get("name", "scenario"))


def parse_scenario(path) -> Scenario:
    """Read and validate a scenario file; the tree and agents are built once as a check."""
    path = Path(path)
    if not path.is_file():
        raise ScenarioError("missing", f"{path}: no such scenario file")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError("json", f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}")
    if not isinstance(raw, dict):
        raise ScenarioError("schema", "<root>: scenario must be a JSON object")
    sc = scenario_from_dict(raw)
    sc.build()
    return sc


def write_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(json.dumps(sc.to_dict(), indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# generated scenarios


def random_scenario(seed: int, d_max: int = 4, K_max: int = 5, b_max: int = 3) -> Scenario:
    """Seeded random scenario with mixed utilities and cap kinds.

    Sizes are kept to at most a few hundred nodes so a large suite stays fast.
    """
    rng = np.random.default_rng(seed)
    # every seventh scenario is a single agent in autarky
    d = 1 if seed % 7 == 0 else int(rng.integers(2, d_max + 1))
    K = int(rng.integers(1, K_max + 1))
    b = int(rng.integers(2, b_max + 1))
    while b ** K > 250:
        K -= 1
    agents = []
    caps = ["none", "proportional", "overdraft"]
    for i in range(d):
        if rng.random() < 0.5:
            util = {"family": "log", "beta": round(float(rng.uniform(0, 0.1)), 4)}
        else:
            p = float(rng.uniform(-2.0, 0.5))
            if abs(p) < 0.05:
                p = 0.25
            util = {"family": "power", "p": round(p, 4),
                    "beta": round(float(rng.uniform(0, 0.1)), 4)}
        kind = caps[(seed + i) % 3]
        cap = {"kind": kind}
        if kind == "proportional":
            cap["gamma"] = round(float(rng.uniform(1.1, 2.0)), 4)
        elif kind == "overdraft":
            cap["delta"] = round(float(rng.uniform(0.05, 0.5)), 4)
        agents.append({"utility": util,
                       "endowment": {"generator": "shock", "e0": 1.0,
                                     "sigma": round(float(rng.uniform(0.05, 0.3)), 4),
                                     "lo": 0.5, "hi": 2.0,
                                     "seed": int(rng.integers(0, 2 ** 31))},
                       "cap": cap})
    tree = {"generator": "uniform", "K": K, "branching": b, "T": 1.0,
            "seed": int(rng.integers(0, 2 ** 31))}
    return Scenario(tree, agents, seed=seed, name=f"random-{seed}")


def _demo(name, caps) -> Scenario:
    agents = []
    for i, cap in enumerate(caps):
        agents.append({"utility": {"family": "log", "beta": 0.05},
                       "endowment": {"generator": "shock", "e0": 1.0, "sigma": 0.2,
                                     "lo": 0.5, "hi": 2.0, "seed": 11 + i},
                       "cap": cap})
    tree = {"generator": "uniform", "K": 4, "branching": 2, "T": 1.0, "probs": [0.5, 0.5]}
    return Scenario(tree, agents, seed=0, name=name,
                    output=OutputOptions(deviations=20))


def demo_scenarios() -> dict[str, Scenario]:
    """Symmetric pair plus one scenario per cap kind (complete, proportional, overdraft)."""
    sym = []
    for _ in range(2):
        sym.append({"utility": {"family": "log", "beta": 0.0},
                    "endowment": {"generator": "shock", "e0": 1.0, "sigma": 0.2,
                                  "lo": 0.5, "hi": 2.0, "seed": 7},
                    "cap": {"kind": "none"}})
    symmetric = Scenario({"generator": "uniform", "K": 3, "branching": 2, "T": 1.0,
                          "probs": [0.5, 0.5]}, sym, name="symmetric",
                         output=OutputOptions(deviations=20))
    return {
        "symmetric": symmetric,
        "complete": _demo("complete", [{"kind": "none"}, {"kind": "none"}]),
        "proportional": _demo("proportional", [{"kind": "proportional", "gamma": 1.2},
                                               {"kind": "proportional", "gamma": 1.5}]),
        "overdraft": _demo("overdraft", [{"kind": "overdraft", "delta": 0.1},
                                         {"kind": "overdraft", "delta": 0.3}]),
    }
