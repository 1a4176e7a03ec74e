class WellFusionError(Exception):
    """Base class for package errors."""


class DomainError(WellFusionError, ValueError):
    """An argument lies outside the domain of a formula."""


class InfeasibleConfigError(WellFusionError, ValueError):
    """A well configuration admits no valid operating range."""


class ConfigError(WellFusionError, ValueError):
    """A scenario or configuration document is malformed."""


class DecouplingError(WellFusionError):
    """The plant cannot be decoupled by static state feedback."""


class RegularizationError(WellFusionError):
    """The MPC normal matrix is singular; raise the control weights."""


class SimulationDiverged(WellFusionError):
    """The closed loop produced non-finite values.

    ``trace`` holds the records collected before divergence.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
