"""Exception hierarchy shared by the library and the command line."""


class LowRankNASError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ShapeError(LowRankNASError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = 2


class ConfigError(LowRankNASError, ValueError):
    """A configuration value or key is invalid."""

    exit_code = 2

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DependencyError(LowRankNASError):
    """A pipeline stage is missing an artifact produced by an earlier stage."""

    exit_code = 3

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class NumericError(LowRankNASError, ArithmeticError):
    """An iterative method failed to converge or training diverged."""

    exit_code = 4

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InfeasibleWindowError(LowRankNASError):
    """No configuration in the search space satisfies the FLOPs window."""

    exit_code = 5


class CheckpointError(LowRankNASError):
    """Base class for checkpoint format problems."""

    exit_code = 6


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class ShapeTableError(CheckpointError):
    pass
