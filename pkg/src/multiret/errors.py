"""Exception hierarchy; each error knows the process exit code it maps to."""

from __future__ import annotations


class MultiretError(Exception):
    exit_code = 1

    def __init__(self, message: str, *, stage: str | None = None) -> None:
        super().__init__(message)
        self.stage = stage


class ConfigError(MultiretError):
    exit_code = 2


class ParameterError(ConfigError, ValueError):
    """Model or fit parameter outside its admissible range."""


class DataError(MultiretError):
    exit_code = 3


class SchemaError(DataError):
    """Input file header does not match the expected column map."""


class NumericalError(MultiretError):
    exit_code = 4


class RankError(NumericalError):
    """Matrix failed the full-rank check needed for inversion or rescaling."""


class QuadratureError(NumericalError):
    pass
