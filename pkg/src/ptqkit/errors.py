"""Exception hierarchy. The CLI maps these onto its exit codes."""


class PTQError(Exception):
    """Base class for every error raised by ptqkit."""


class DimensionError(PTQError, ValueError):
    pass


class DegenerateRangeError(PTQError, ValueError):
    """A clip range collapsed to a point (upper <= lower)."""


class ConfigurationError(PTQError):
    """Model / registry state is inconsistent with the requested operation."""


class TopologyError(PTQError):
    """Graph rewrite met a consumer it cannot handle without changing semantics."""


class CalibrationError(PTQError):
    pass


class NumericalError(PTQError, ArithmeticError):
    pass
