"""Exception hierarchy shared by every stage of the framework.

Each exception class carries the process exit code the command-line front end
uses when it escapes a command, so the taxonomy lives in one place.
"""


class DermSSLError(Exception):
    exit_code = 1


class UsageError(DermSSLError):
    exit_code = 2


class ConfigError(DermSSLError):
    exit_code = 3


class DataError(DermSSLError):
    exit_code = 4


class UnknownLabelError(DataError, KeyError):
    def __init__(self, label, source):
        self.label = label
        self.source = source
        super().__init__(f"unknown label {label!r} for source {source!r}")

    def __str__(self):
        return self.args[0]


class SplitError(DataError, ValueError):
    pass


class LogFormatError(DataError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CoverageError(DataError, ValueError):
    pass


class TrainingAbort(DermSSLError):
    exit_code = 5

    def __init__(self, epoch, term, value):
        self.epoch = epoch
        self.term = term
        self.value = value
        super().__init__(f"non-finite {term} ({value}) at epoch {epoch}")


class ParityError(DermSSLError):
    exit_code = 6


class ShapeError(DermSSLError, ValueError):
    def __init__(self, what, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


class FrozenBackboneError(DermSSLError, RuntimeError):
    pass


class CheckpointMismatchError(ConfigError):
    pass
