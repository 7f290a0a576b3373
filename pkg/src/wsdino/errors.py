"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class WSDinoError(Exception):
    exit_code = 2


class ConfigError(WSDinoError, ValueError):
    """Invalid configuration key or value."""

    exit_code = 1


class ParameterError(ConfigError):
    """A function argument is outside its valid domain."""


class IncompatibleCheckpointError(ConfigError):
    """Checkpoint version tag or config hash does not match the current run."""


class DataError(WSDinoError):
    exit_code = 2


class StructureError(DataError):
    """Dataset or grouping structure cannot satisfy the requested contract."""


class ShapeError(DataError, ValueError):
    pass


class DegenerateInputError(DataError, ValueError):
    """Zero-variance images, zero vectors and similar unusable inputs."""


class DependencyError(DataError):
    """A required input artifact is missing."""


class NumericalError(WSDinoError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
