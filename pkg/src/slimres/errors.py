"""Exception types shared across the package."""


class SlimresError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SlimresError):
    """A run or backbone configuration failed schema validation."""


class WidthBoundError(SlimresError):
    """Requested width is below the model's configured lower bound."""


class DegenerateBatchError(SlimresError):
    """Batch statistics requested on a batch too small to normalize."""


class CalibrationRequiredError(SlimresError):
    """Evaluation-mode normalization requested without calibrated statistics."""


class InsufficientDataError(SlimresError):
    """A calibration stream yielded no samples."""


class IngestionError(SlimresError):
    """Dataset files are missing or corrupt."""


class InfeasibleBudgetError(SlimresError):
    """No table row fits under the requested resource budget."""


class NonFiniteLossError(SlimresError):
    """A training step produced a NaN or infinite loss."""
