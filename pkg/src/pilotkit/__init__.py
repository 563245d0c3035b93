"""pilotkit: a pilot-style runtime for heterogeneous task workloads.

Executes workloads of executables and function calls over local or
simulated multi-node resources, and computes trace-based performance
metrics (TTX, resource utilization, overhead).
"""

from .core import (
    Fabric,
    LatencyModel,
    PilotDescription,
    TaskDescription,
    TaskKind,
    TaskState,
    load_pilot_profile,
)
from .client import PilotManager, Session, TaskManager, create_session

__version__ = "0.1.0"

__all__ = [
    "Fabric",
    "LatencyModel",
    "PilotDescription",
    "TaskDescription",
    "TaskKind",
    "TaskState",
    "load_pilot_profile",
    "Session",
    "PilotManager",
    "TaskManager",
    "create_session",
    "__version__",
]
