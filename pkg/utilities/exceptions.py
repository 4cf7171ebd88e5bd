"""Python module with the error types raised across the package and their CLI exit codes."""


class ExpressNetError(Exception):
    """Base class for every error the CLI knows how to report."""
    exit_code = 1


class ConfigError(ExpressNetError):
    """Invalid, unknown or inconsistent configuration."""
    exit_code = 2


class DataError(ExpressNetError):
    """Manifest, split or batch-stream problems."""
    exit_code = 3


class PreprocessError(DataError):
    """A single sample could not be decoded, cropped or resized."""

    def __init__(self, sample_id: str, message: str):
        super().__init__(f"Sample '{sample_id}': {message}")
        self.sample_id = sample_id
        self.detail = message


class NumericalError(ExpressNetError):
    """A non-finite value appeared in checked mode or in the training loss."""
    exit_code = 4


class CheckpointError(ExpressNetError):
    """Corrupt checkpoint, version mismatch or shape mismatch against the config."""
    exit_code = 5


class GradCheckError(ExpressNetError):
    """An analytic gradient disagreed with finite differences beyond tolerance."""
    exit_code = 6

    def __init__(self, component: str, error: float, tolerance: float, failed=None):
        self.failed = list(failed or [component])
        super().__init__(
            f"Gradient check failed for '{component}': relative error {error:.3e} > {tolerance:.1e}"
            f" (failing components: {', '.join(self.failed)})"
        )
        self.component = component
        self.error = error
        self.tolerance = tolerance


class ShapeError(ExpressNetError, ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(ExpressNetError, RuntimeError):
    """Backward requested for a tensor the tape never produced."""
