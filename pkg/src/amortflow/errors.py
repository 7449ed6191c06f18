"""Exception hierarchy shared by every module of the package."""


class AmortflowError(Exception):
    """Base class for all package errors."""


class ShapeError(AmortflowError, ValueError):
    """Operand shapes are incompatible with an operation."""


class DomainError(AmortflowError, ValueError):
    """An argument lies outside the domain of an operation."""


class ContractError(AmortflowError, RuntimeError):
    """A precondition on object state was violated (e.g. untrained network)."""


class SimulationError(AmortflowError, RuntimeError):
    """A simulator produced unusable output.

    The offending parameter vector is kept in ``theta`` for inspection.
    """

    def __init__(self, message, theta=None):
        super().__init__(message)
        self.theta = theta


class TrainingError(AmortflowError, RuntimeError):
    """Optimization cannot proceed (non-finite loss or gradients, too many failures)."""


class FormatError(AmortflowError, ValueError):
    """A checkpoint or CSV file is malformed.

    ``offset`` is the byte offset at which the problem was detected, if known.
    """

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(AmortflowError, ValueError):
    """A workflow configuration key or value failed validation."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
