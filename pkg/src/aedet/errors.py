"""Exception hierarchy shared by every module of the package."""


class AEDetError(Exception):
    """Base class for all package errors."""


class ConfigError(AEDetError, ValueError):
    """Invalid configuration, shape mismatch or unknown name."""


class NumericError(AEDetError, FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


class UsageError(AEDetError, RuntimeError):
    """API called in a state where it cannot work (e.g. backward on a detached tensor)."""


class LabelError(AEDetError, ValueError):
    """Malformed ground-truth box."""


class GenerationError(AEDetError, RuntimeError):
    """Synthetic scene generation gave up."""


class DatasetError(AEDetError, IOError):
    """Dataset directory is missing files or could not be written."""


class CorruptDatasetError(DatasetError):
    """Dataset content does not match its manifest checksum."""


class CheckpointError(AEDetError, IOError):
    """Checkpoint file is truncated, has bad magic or a wrong version."""


class MetricError(AEDetError, ValueError):
    """Degenerate input to a metric."""


class EvalError(AEDetError, RuntimeError):
    """Evaluation could not be run."""


class PlotError(AEDetError, ValueError):
    """Plot inputs lack the series needed for the requested figure."""
