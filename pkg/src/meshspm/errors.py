"""Exception hierarchy shared by the library and the command line."""


class MeshSPMError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(MeshSPMError, ValueError):
    """Inputs violate a documented precondition."""

    exit_code = 2


class NumericalError(MeshSPMError, ArithmeticError):
    """A numerical procedure cannot proceed (singular design, etc.)."""

    exit_code = 3


class InputOutputError(MeshSPMError, OSError):
    """Reading or writing a file failed."""

    exit_code = 4
