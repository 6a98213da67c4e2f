"""
Exception hierarchy for merge-rec.

Every error carries the CLI exit code it maps to and, once it has passed
through a pipeline stage, the name of that stage.
"""
from typing import Optional


EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class MergeRecError(Exception):
    """Base class for all expected failures."""

    exit_code = 1

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.stage = stage

    def __str__(self) -> str:
        if self.stage:
            return f"[{self.stage}] {self.message}"
        return self.message


# ========================
# USAGE / CONFIG (exit 2)
# ========================

class ConfigError(MergeRecError):
    exit_code = EXIT_USAGE


class UsageError(MergeRecError):
    exit_code = EXIT_USAGE


# ========================
# DATA (exit 3)
# ========================

class DataError(MergeRecError):
    exit_code = EXIT_DATA


class ParseError(DataError):
    """Malformed ratings line."""

    def __init__(self, message: str, line_no: int, stage: Optional[str] = None):
        super().__init__(f"line {line_no}: {message}", stage=stage)
        self.line_no = line_no


class EmptyDatasetError(DataError):
    pass


class InputError(DataError):
    """Item id outside the model vocabulary."""


class ArtifactError(DataError):
    """Bad magic, unsupported version or truncated binary artifact."""


class ArchMismatchError(DataError):
    """Artifacts built for different architectures or configs were mixed."""


class MergeError(DataError):
    pass


class ValidationError(DataError):
    pass


class InconsistencyError(DataError):
    pass


class DegeneratePlaneError(DataError):
    pass


# ========================
# NUMERIC (exit 4)
# ========================

class NumericError(MergeRecError):
    exit_code = EXIT_NUMERIC


class TrainingError(NumericError):
    """Non-finite loss during an optimizer step."""

    def __init__(self, message: str, diagnostics: Optional[dict] = None, stage: Optional[str] = None):
        super().__init__(message, stage=stage)
        self.diagnostics = diagnostics or {}


class ContrastiveError(NumericError):
    pass
