"""Adaptive Lyapunov-constrained MPC for fault-tolerant planar AUV tracking."""

from almpc.allocation import FaultParameters, InputLimits, ThrusterLayout
from almpc.backstepping import AugmentedError, BackstepGains, ReferenceSignal
from almpc.dynamics import HydroModel, VehicleState
from almpc.estimation import ModeBelief, ModeLibrary
from almpc.lmpc import OcpConfig, OcpSolution
from almpc.scenario import ScenarioConfig, compute_metrics, run
from almpc.supervisor import FusionConfig, SupervisorState

__version__ = "0.1.0"

__all__ = [
    "AugmentedError",
    "BackstepGains",
    "FaultParameters",
    "FusionConfig",
    "HydroModel",
    "InputLimits",
    "ModeBelief",
    "ModeLibrary",
    "OcpConfig",
    "OcpSolution",
    "ReferenceSignal",
    "ScenarioConfig",
    "SupervisorState",
    "ThrusterLayout",
    "VehicleState",
    "compute_metrics",
    "run",
]
