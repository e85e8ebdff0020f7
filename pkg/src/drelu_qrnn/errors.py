"""Exception hierarchy shared by every module."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


class DataError(RuntimeError):
    """Corpus, vocabulary or checkpoint could not be used."""


class NumericalError(RuntimeError):
    """Training produced a non-finite value or a gradient check failed."""
