"""Error classes the command line maps to exit codes."""


class ConfigError(ValueError):
    """Invalid configuration or hyperparameters (exit code 2)."""

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems or [message])


class DataError(ValueError):
    """Unreadable or inconsistent data (exit code 3)."""


class NumericError(ArithmeticError):
    """Non-finite objective or gradient during optimisation (exit code 4)."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
