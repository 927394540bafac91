"""Exception families. Each family maps to a distinct CLI exit code."""


class TriageError(Exception):
    exit_code = 1


class IOFailure(TriageError):
    exit_code = 3


class SchemaError(TriageError):
    """Column layout, dimension, or per-row shape does not match what is expected."""

    exit_code = 4

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class ConfigError(TriageError):
    exit_code = 5


class TrainingError(TriageError):
    exit_code = 6


class ModelFileError(IOFailure):
    pass


class VersionError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


class TruncatedError(ModelFileError):
    pass
