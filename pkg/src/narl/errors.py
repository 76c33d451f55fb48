"""Exception types shared across the package."""


class NarlError(Exception):
    """Base class for all package errors."""


class ShapeError(NarlError):
    """Operand shapes are incompatible."""


class DomainError(NarlError):
    """A value lies outside the mathematical domain of an operation."""


class ContractError(NarlError):
    """An API precondition was violated."""


class HyperParamError(NarlError):
    """A robust-loss hyperparameter is out of its valid range."""


class ConfigError(NarlError):
    """Invalid configuration."""


class ParseError(NarlError):
    """Malformed input file."""


class UnsupportedError(NarlError):
    """The requested combination is not supported."""


class NumericalError(NarlError):
    """A non-finite value appeared during a numerical computation.

    ``stage`` names the computation that produced it; ``iteration`` is the
    training iteration when raised from a training loop.
    """

    def __init__(self, message: str, stage: str | None = None,
                 iteration: int | None = None):
        super().__init__(message)
        self.stage = stage
        self.iteration = iteration
