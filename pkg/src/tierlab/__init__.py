"""tierlab: deterministic two-tier memory migration simulator."""

from .mem_model import (
    AccessKind,
    CostModel,
    FaultKind,
    Machine,
    OutOfMemoryError,
    PLATFORM_PROFILES,
    SimulationError,
    Tier,
    TierSpec,
)
from .sim_engine import Simulation, build_simulation, detect_stable
from .workload import Scenario, ScenarioKind, build_scenario, zipf_sample

__version__ = "0.1.0"

__all__ = [
    "AccessKind",
    "CostModel",
    "FaultKind",
    "Machine",
    "OutOfMemoryError",
    "PLATFORM_PROFILES",
    "Scenario",
    "ScenarioKind",
    "SimulationError",
    "Simulation",
    "Tier",
    "TierSpec",
    "build_scenario",
    "build_simulation",
    "detect_stable",
    "zipf_sample",
    "__version__",
]
