"""Exception taxonomy shared by every module.

The CLI maps these onto process exit codes; library callers catch them
directly.
"""


class TaperNormError(Exception):
    """Base class for all package errors."""


class DimensionError(TaperNormError):
    """Shapes or axes do not line up for an operation."""


class DomainError(TaperNormError):
    """Input is outside an op's mathematical domain (e.g. sqrt of a negative)."""


class NumericError(TaperNormError):
    """An op produced NaN/Inf, or a numeric verification check failed."""


class ContractError(TaperNormError):
    """A documented precondition was violated by the caller."""


class CalibrationError(ContractError):
    """Calibration or target freezing attempted without any accumulated statistics."""


class InputError(TaperNormError):
    """Bad external input: missing/empty corpus, out-of-range token ids."""


class FormatError(InputError):
    """A serialized artifact is corrupt, truncated, or of the wrong version."""


class ConfigError(TaperNormError):
    """Invalid configuration file or override."""


class TrainingError(TaperNormError):
    """Training aborted (non-finite loss or gradients).

    Carries the failing step and, when the trainer raised it, the metrics
    recorded up to that step so callers can treat divergence as an outcome.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
        self.partial_metrics = None
