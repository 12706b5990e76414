"""Exception hierarchy shared by all modules."""


class VortexFluctError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(VortexFluctError, ValueError):
    pass


class SingularityError(VortexFluctError, ValueError):
    """Exact (unregularized) kernel evaluated at a coincident point."""


class SamplingError(VortexFluctError, RuntimeError):
    pass


class InvalidStepError(VortexFluctError, ValueError):
    pass


class InvalidPairError(VortexFluctError, ValueError):
    pass


class DomainError(VortexFluctError, ValueError):
    pass


class InvalidConditioningError(VortexFluctError, ValueError):
    """Samples mixed across different common-noise paths."""


class ConfigurationError(VortexFluctError, ValueError):
    pass


class NumericalAlarm(VortexFluctError, RuntimeError):
    """Stability or positivity monitor tripped during a run."""


class FormatError(VortexFluctError, ValueError):
    """Malformed binary artifact (bad magic, version or length)."""
