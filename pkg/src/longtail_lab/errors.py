"""Exception hierarchy. The CLI maps each class onto an exit code."""


class LabError(Exception):
    exit_code = 1


class ConfigError(LabError, ValueError):
    exit_code = 1


class DataError(LabError):
    exit_code = 2


class NumericalError(LabError, FloatingPointError):
    exit_code = 3

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
