"""Optimal transmission scheduling for an energy-harvesting sensor.

Modules: ``model`` (state space and kernels), ``solver`` (value iteration
and oracles), ``structure`` (property checks), ``sim`` (Monte-Carlo
simulation), ``config`` (config files) and ``cli``.
"""

from .model import ModelConfig, StateIndex, table1_config, tiny_config
from .solver import Policy, Solution, ValueTable, pds_value_iteration

__version__ = "0.1.0"

__all__ = ["ModelConfig", "Policy", "Solution", "StateIndex", "ValueTable",
           "pds_value_iteration", "table1_config", "tiny_config"]
