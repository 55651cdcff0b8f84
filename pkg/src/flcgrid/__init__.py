"""Transient-stability simulation and federated Chebyshev-KAN storage controllers."""
from .control import ControlAssignment, Mode, TimeFeature, assign_controllers
from .dynamics import FaultScenario, PhaseNetworks, SystemState, Trajectory, simulate
from .errors import FlcGridError
from .grid import FullNetwork, GeneratorParams, Line, ReducedNetwork, kron_reduce
from .kan import ChebyKanModel, Dataset, flop_count, param_count

__version__ = "0.1.0"

__all__ = [
    "ChebyKanModel",
    "ControlAssignment",
    "Dataset",
    "FaultScenario",
    "FlcGridError",
    "FullNetwork",
    "GeneratorParams",
    "Line",
    "Mode",
    "PhaseNetworks",
    "ReducedNetwork",
    "SystemState",
    "TimeFeature",
    "Trajectory",
    "assign_controllers",
    "flop_count",
    "kron_reduce",
    "param_count",
    "simulate",
]
