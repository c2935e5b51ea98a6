"""Closed-loop knowledge-defined control for converged IT/OT networks.

Fluid network simulator, telemetry preprocessing, moving-average knowledge
graph, utility/cost action selection, atomic command enforcement, three
baseline controllers, evaluation metrics and a seeded comparison harness.
"""

from .config import ConfigError, Scenario, ScenarioConfig, load_config, parse_config
from .harness import compare_controllers, run_scenario, simulate
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConfigError", "Scenario", "ScenarioConfig", "compare_controllers", "load_config",
           "parse_config", "run_scenario", "simulate"]
