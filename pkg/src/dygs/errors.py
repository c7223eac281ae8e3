"""Exception taxonomy mapped to CLI exit codes."""


class ConfigError(Exception):
    """Bad config / usage. CLI exit code 2."""

    exit_code = 2


class DataContractError(Exception):
    """Inputs violate a documented file or shape contract. CLI exit code 3."""

    exit_code = 3


class NumericalError(Exception):
    """Non-finite values during optimization. CLI exit code 4."""

    exit_code = 4

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component
