"""Exception hierarchy shared by the simulator modules."""
from typing import Sequence


class SimulationError(Exception):
    """Base class for every error raised by the simulator."""


class ConfigError(SimulationError):
    """Malformed, unreadable or unknown configuration."""


class PacketError(SimulationError):
    """Invalid packet parameters, or evaluation before a packet exists."""


class OpticsError(SimulationError):
    """Invalid layout or an ambiguous element schedule."""


class MarkerError(SimulationError):
    """Marker misuse: double interaction, beable of the wrong kind."""


class ScheduleError(SimulationError):
    """A splitter toggle time falls inside an overlap-region transit window."""


class NodeProximity(SimulationError):
    """The conditional wave function is too close to a node to guide a trajectory."""

    def __init__(self, indices: Sequence[int], message: str = ""):
        self.indices = tuple(int(i) for i in indices)
        super().__init__(message or f"node proximity at trajectories {list(self.indices)}")


class RunFailure(SimulationError):
    """Too many flagged (node-degenerate or unterminated) trajectories for the report to be trusted."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class OracleFailure(SimulationError):
    """Two independent oracle evaluations disagree."""
