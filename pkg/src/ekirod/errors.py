"""Exception hierarchy shared across the package.

The CLI maps each branch to a distinct exit code, so new exceptions should
subclass the closest existing branch rather than ``EkirodError`` directly.
"""


class EkirodError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(EkirodError):
    """Invalid configuration value or inconsistent combination of values."""


class InputOutputError(EkirodError):
    """Missing, unreadable, or mis-sized input file, or unwritable output."""


class ParseError(EkirodError):
    """Syntactically malformed configuration or data file."""


class SolverError(EkirodError):
    """Time integration failed (divergence, non-finite state)."""


class StiffnessError(SolverError):
    """Adaptive step size underflowed the configured minimum.

    Carries the integration time at which the controller gave up.
    """

    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


class EvaluationError(EkirodError):
    """A forward-map evaluation failed for one particle.

    Flows treat this as recoverable: the failing particle's drift is
    replaced by the pure regulariser term (see ``flows``).
    """


class DegenerateImageError(EvaluationError):
    """A binary image contains no black pixel, so distances are undefined."""
