"""
Error types shared across the SPECTRE modules.

Each error carries the CLI exit code it maps to, so main.py can turn any
failure into a machine-readable record without inspecting messages.
"""
from typing import List, Optional


class SpectreError(Exception):
    """Base class for expected failures"""

    exit_code = 1
    kind = "error"

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.stage = stage

    def to_record(self) -> dict:
        return {
            "status": "error",
            "error": self.kind,
            "stage": self.stage,
            "message": str(self),
        }


class ConfigError(SpectreError, ValueError):
    """Invalid or inconsistent experiment configuration"""

    exit_code = 2
    kind = "config_error"


class InvalidArgumentError(SpectreError, ValueError):
    """An operation was called with arguments outside its contract"""

    exit_code = 2
    kind = "invalid_argument"


class DataError(SpectreError, ValueError):
    """Input data could not be parsed or is unusable"""

    exit_code = 3
    kind = "data_error"


class SolverError(SpectreError, RuntimeError):
    """An optimizer failed to produce a usable solution"""

    exit_code = 4
    kind = "solver_failure"

    def __init__(self, message: str, stage: Optional[str] = None,
                 trace: Optional[List[float]] = None):
        super().__init__(message, stage)
        self.trace = list(trace) if trace is not None else []


class DegenerateGroupError(SolverError):
    """Worst/best-case distribution drives the group's probability mass to zero"""

    kind = "degenerate_group"
