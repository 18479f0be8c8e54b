"""Exception hierarchy shared by all modules.

Each family maps to one CLI exit code.
"""


class ConfflowError(Exception):
    exit_code = 1


class ConfigError(ConfflowError):
    """Invalid configuration, expression or precondition on inputs."""

    exit_code = 2

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = list(errors) if errors else [message]


class NumericalError(ConfflowError):
    """A numerical invariant broke (positivity, coercivity, sign change)."""

    exit_code = 3


class NonConvergence(ConfflowError):
    """An iteration stopped before reaching its tolerance.

    ``payload`` carries whatever partial result the caller may still use.
    """

    exit_code = 4

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload
