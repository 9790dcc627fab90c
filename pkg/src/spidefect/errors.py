"""Exception hierarchy shared by all stages."""


class SpiDefectError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SpiDefectError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class RecordError(SpiDefectError, ValueError):
    """A single record violates its invariants (e.g. a non-finite measurement)."""


class SchemaError(SpiDefectError):
    """Input file is missing required columns."""

    def __init__(self, missing, path=None):
        self.missing = list(missing)
        where = f" in {path}" if path is not None else ""
        super().__init__(f"missing required columns{where}: {', '.join(self.missing)}")


class EmptyInputError(SpiDefectError):
    """Input file has no header or no content at all."""


class StructuralError(SpiDefectError):
    """Pin data does not match the board layout (missing or surplus pins)."""


class CalibrationError(SpiDefectError):
    """The planted-signal intercept search did not converge."""


class TrainingError(SpiDefectError):
    """Boosting could not proceed (single-class target, non-finite loss, ...)."""
