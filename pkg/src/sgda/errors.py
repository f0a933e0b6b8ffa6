"""Exception hierarchy shared by every stage of the pipeline."""


class SgdaError(Exception):
    """Base class; ``exit_code`` is what the CLI returns when it escapes."""

    exit_code = 1


class UsageError(SgdaError):
    exit_code = 2


class ConfigError(SgdaError, ValueError):
    exit_code = 2


class DimensionError(SgdaError, ValueError):
    exit_code = 2


class ParseError(SgdaError, ValueError):
    exit_code = 3


class DataError(SgdaError):
    exit_code = 3


class RoutingError(SgdaError, KeyError):
    exit_code = 3


class GenerationError(SgdaError):
    exit_code = 3


class NumericError(SgdaError, ArithmeticError):
    exit_code = 4


class DivergenceError(NumericError):
    """Non-finite loss during training."""

    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
