"""Exception hierarchy shared by all modules."""


class RCMError(Exception):
    """Base class for every error raised by rcmlab."""


class ConfigurationError(RCMError, ValueError):
    """Invalid parameters: bad environment spec, bad constants, malformed config."""


class GeometryError(RCMError, ValueError):
    """A ball or window does not fit in the periodic box without self-wrap."""


class ContractError(RCMError, ValueError):
    """A precondition on the input data is violated (e.g. incompatible rhs)."""


class ConvergenceError(RCMError, RuntimeError):
    """An iterative solver hit its iteration cap; ``report`` holds the last state."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
