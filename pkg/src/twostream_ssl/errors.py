"""Exception types shared across the package.

Each category maps to a CLI exit code (see cli.py): configuration errors
exit 2, data errors 3, divergence 4, and plain OSError surfaces as 5.
"""


class ConfigError(ValueError):
    """Invalid configuration value; message names the offending field."""

    exit_code = 2


class DataError(RuntimeError):
    """Dataset or input-file problem (missing class, too few sources, ...)."""

    exit_code = 3


class CorruptionError(DataError):
    """On-disk artifact failed validation (bad version, checksum, truncation)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the iteration index."""

    exit_code = 4

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration
