"""Exception hierarchy shared by the solvers, file formats and CLI."""


class DmhError(Exception):
    """Base class; ``exit_code`` is what the CLI returns when this escapes."""

    exit_code = 1


class ConfigurationError(DmhError, ValueError):
    exit_code = 1


class DataFormatError(DmhError, OSError):
    """Malformed or inconsistent file on disk."""

    exit_code = 2


class ShapeError(DmhError, ValueError):
    exit_code = 2


class NumericError(DmhError, ArithmeticError):
    exit_code = 3


class DegenerateDistributionError(NumericError):
    pass


class InvariantViolation(DmhError, AssertionError):
    exit_code = 3


class StageError(DmhError):
    """A sub-solver failure annotated with the pipeline stage it came from."""

    def __init__(self, stage, cause, iteration=None):
        self.stage = stage
        self.cause = cause
        self.iteration = iteration
        self.exit_code = getattr(cause, "exit_code", 3)
        where = f"{stage}" if iteration is None else f"{stage} (outer iteration {iteration})"
        super().__init__(f"{where}: {cause}")
