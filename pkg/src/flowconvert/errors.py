"""Exception taxonomy shared by all flowconvert modules.

The CLI maps these onto exit codes; library users can catch the base
classes. Everything raised on purpose by this package derives from
FlowConvertError.
"""


class FlowConvertError(Exception):
    """Base class for all errors raised by flowconvert."""


class ConfigurationError(FlowConvertError):
    """Invalid configuration values (nonpositive counts, bad ranges, ...)."""


class ContractError(FlowConvertError, ValueError):
    """An operation was called with arguments violating its contract
    (shape mismatch, empty input where nonempty is required, ...)."""


class UnknownIdError(FlowConvertError, KeyError):
    """Lookup of a word / phoneme / speaker / accent id that does not exist."""


class NumericError(FlowConvertError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class TrainingDivergedError(FlowConvertError, RuntimeError):
    """Training loss became non-finite; carries step diagnostics."""

    def __init__(self, message: str, step: int | None = None, history: list | None = None):
        super().__init__(message)
        self.step = step
        self.history = history or []


class ModeUnsupportedError(ContractError):
    """A conversion mode cannot handle the request (e.g. unequal phoneme
    counts for remap); the message names the mode that can."""


class StageOrderingError(FlowConvertError, RuntimeError):
    """A pipeline stage was invoked before the stages it depends on."""
