"""Exception types shared across the package.

Each class carries a short ``category`` used by the CLI to print a
categorized error line and choose the exit code.
"""


class MtclipError(Exception):
    category = "error"
    exit_code = 1


class DimensionError(MtclipError, ValueError):
    category = "dimension"
    exit_code = 2


class ArgumentError(MtclipError, ValueError):
    category = "argument"
    exit_code = 2


class ConfigError(MtclipError, ValueError):
    category = "config"
    exit_code = 3


class InputError(MtclipError, ValueError):
    category = "input"
    exit_code = 2


class UsageError(MtclipError, RuntimeError):
    category = "usage"
    exit_code = 2


class FormatError(MtclipError):
    """Malformed shard file. ``offset`` is the byte position of the failure."""

    category = "format"
    exit_code = 4

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class CheckpointError(MtclipError):
    category = "checkpoint"
    exit_code = 4


class MetricError(MtclipError, ValueError):
    category = "metric"
    exit_code = 5


class ReportError(MtclipError, ValueError):
    category = "report"
    exit_code = 5


class TrainingDivergedError(MtclipError, FloatingPointError):
    category = "diverged"
    exit_code = 6
