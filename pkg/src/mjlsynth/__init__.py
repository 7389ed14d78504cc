"""Correct-by-construction control of Markov jump linear systems.

The pipeline abstracts a jump system with additive noise into an interval
MDP whose transition intervals hold with a chosen confidence, synthesises
a robust policy for a PCTL formula and refines it into a feedback law.
"""

from .abstraction import Abstraction, IntervalMdp, build_abstraction, export_prism, product, robust_merge
from .checker import Policy, ValueVector, evaluate, robust_expectation, synthesize
from .estimator import MjlsController
from .geometry import Partition, backward_reach, build_partition, enabled_actions, label_state
from .model import MjlsSpec, group_steps, load_model, parse_model, validate
from .pctl import parse_formula
from .runtime import Controller, compute_input, simulate
from .scenario import pac_interval

__all__ = [
    "Abstraction", "Controller", "IntervalMdp", "MjlsController", "MjlsSpec", "Partition", "Policy",
    "ValueVector", "backward_reach", "build_abstraction", "build_partition", "compute_input",
    "enabled_actions", "evaluate", "export_prism", "group_steps", "label_state", "load_model",
    "parse_formula", "parse_model", "pac_interval", "product", "robust_expectation", "robust_merge",
    "simulate", "synthesize", "validate",
]
__version__ = "0.1.0"
