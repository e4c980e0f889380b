"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to.
"""


class FlatlandError(Exception):
    exit_code = 1


class ValidationError(FlatlandError, ValueError):
    exit_code = 2


class DivergenceError(FlatlandError, FloatingPointError):
    """A chain produced a non-finite state or gradient."""

    exit_code = 3

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class QuadratureGuardError(FlatlandError, RuntimeError):
    exit_code = 4
