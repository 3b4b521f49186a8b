"""Hybrid AC/DC optimal power flow with staged voltage-droop control."""

from .case import (NetworkCase, Scenario, apply_scenario, parse_case,
                   parse_scenario, serialize_case, serialize_scenario)
from .equations import OpfEquations
from .nlp import OpfProblem, OpfSolution, SolverOptions, solve

__version__ = "0.1.0"

__all__ = [
    "NetworkCase",
    "Scenario",
    "apply_scenario",
    "parse_case",
    "parse_scenario",
    "serialize_case",
    "serialize_scenario",
    "OpfEquations",
    "OpfProblem",
    "OpfSolution",
    "SolverOptions",
    "solve",
    "__version__",
]
