"""Exception types shared across the package."""


class AfemError(Exception):
    """Base class for all package-specific failures."""


class SolverError(AfemError):
    """A linear solve did not meet its residual tolerance or the system is
    structurally singular."""


class ConfigError(AfemError):
    """A run configuration failed validation."""


class ToleranceError(AfemError):
    """An approximation routine could not reach the requested accuracy
    within its resource limits."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved
