"""Exception hierarchy shared by every module."""


class LabError(Exception):
    """Base class for all errors raised by loglandscape."""


class InputError(LabError, ValueError):
    """Malformed or out-of-domain input (non-finite entries, bad shapes, bad edges)."""


class DimensionError(InputError):
    pass


class NotPSDError(LabError):
    """A matrix expected to be positive semi-definite has a clearly negative eigenvalue."""


class FitError(LabError):
    """Too few usable points to fit."""


class UnsupportedError(LabError):
    """The model does not expose the quantity asked for (e.g. no output gradient)."""


class PositivityError(LabError):
    """The loss dropped to (or below) zero where log L is required."""


class EscapeNotObservedError(LabError):
    """Every first-passage run was censored by the step cap."""


class DivergedError(LabError):
    """Raised when an iteration produces non-finite or exploding values.

    ``partial`` carries whatever was recorded before the blow-up (a
    Trajectory for SGD/SDE runs) so callers can still persist it.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ConfigError(LabError):
    """Experiment configuration failed schema validation."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
