"""Exception hierarchy shared by every module."""


class PagmilError(Exception):
    """Base class for all fatal errors raised by the laboratory."""


class InputError(PagmilError, ValueError):
    """Malformed numeric input (shape mismatch, non-finite values)."""


class PreconditionError(PagmilError, ValueError):
    pass


class UndefinedMetricError(PagmilError, ValueError):
    """A metric cannot be computed, e.g. AUC on a single-class label set."""


class SpecError(PagmilError, ValueError):
    """A synthetic slide description cannot be realised."""


class SelectionError(PagmilError, RuntimeError):
    pass


class InvariantViolation(PagmilError, RuntimeError):
    """Internal invariant broken, e.g. an attempt to update a frozen head."""


class RoutingError(PagmilError, RuntimeError):
    pass


class RegistryError(PagmilError, RuntimeError):
    pass


class ConfigError(PagmilError, ValueError):
    pass


class CheckpointError(PagmilError, ValueError):
    pass
