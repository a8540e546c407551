"""
Errors Module - Exception hierarchy shared by the numerical services and the CLI.
Each class carries the process exit code reported by the command layer.
"""


class FracGpError(Exception):
    """Base class for every error raised by fracgp."""

    exit_code = 1
    kind = "error"


class ConfigurationError(FracGpError):
    """Invalid run configuration or inconsistent component setup."""

    exit_code = 2
    kind = "configuration"


class ParameterError(ConfigurationError):
    """A parameter is outside its admissible range."""

    kind = "parameter"


class UnsupportedConfigurationError(ConfigurationError):
    """A combination the library does not implement (e.g. RL terms in 2D)."""

    kind = "unsupported"


class DataError(FracGpError):
    """Malformed, missing or insufficient input data."""

    exit_code = 3
    kind = "data"


class NumericError(FracGpError):
    """Non-finite values or failed numerical routines."""

    exit_code = 4
    kind = "numeric"


class FactorizationError(NumericError):
    """Cholesky factorization failed even at the maximum jitter."""

    kind = "factorization"

    def __init__(self, message: str, minor_index: int = -1):
        super().__init__(message)
        self.minor_index = minor_index


class OptimizerError(FracGpError):
    """The optimizer could not make progress or was aborted."""

    exit_code = 5
    kind = "optimizer"
