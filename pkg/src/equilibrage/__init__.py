"""Equilibria on finite event trees: Negishi weights, state-price densities,
synthesized complete markets and their certification."""
from .lattice import (EventTree, TimeGrid, TreeError, TreeProcess, build_tree,
                      doob_decompose, multiplicative_decompose, n_functional)
from .marketize import MarketRealization, marketize
from .negishi import EquilibriumSolution, SolverOptions, solve
from .preferences import AgentSpec, UtilitySpec, regularity_report
from .scenario import Scenario, ScenarioError, parse_scenario, random_scenario
from .verify import Certificate, certify, oracle_best_response

__version__ = "0.1.0"

__all__ = [
    "EventTree", "TimeGrid", "TreeError", "TreeProcess", "build_tree", "doob_decompose",
    "multiplicative_decompose", "n_functional", "MarketRealization", "marketize",
    "EquilibriumSolution", "SolverOptions", "solve", "AgentSpec", "UtilitySpec",
    "regularity_report", "Scenario", "ScenarioError", "parse_scenario", "random_scenario",
    "Certificate", "certify", "oracle_best_response",
]
