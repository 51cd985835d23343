"""Exception hierarchy shared by the simulator, the harness and the API."""
from typing import List, Optional


class SimulationError(Exception):
    """Base class for every error raised by the simulator."""


class ConfigError(SimulationError):
    """Invalid configuration, experiment or profile file."""


class CalibrationError(ConfigError):
    """Anchor set violates the performance-surface invariants."""

    def __init__(self, message: str, rows: Optional[List[str]] = None):
        super().__init__(message)
        self.rows = rows or []

    def __str__(self):
        if not self.rows:
            return super().__str__()
        return f"{super().__str__()}: " + "; ".join(self.rows)


class UnknownTierError(SimulationError):
    pass


class NegativeTrafficError(SimulationError):
    pass


class UnboundProcessError(SimulationError):
    pass


class ResidencyError(SimulationError):
    """A page is not where the caller claims it is."""


class CapacityError(SimulationError):
    """Both tiers are full; the run cannot continue."""


class ExchangeError(SimulationError):
    pass


class SelectionProtocolError(SimulationError):
    """Promotion selection was requested without a preceding clear + delay."""


class TraceFormatError(SimulationError):

    def __init__(self, message: str, line_number: int = 0):
        super().__init__(f"line {line_number}: {message}" if line_number else message)
        self.line_number = line_number


class ComparisonError(SimulationError):
    pass
