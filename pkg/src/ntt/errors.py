"""Exception types shared across the package (mapped to CLI exit codes)."""


class NTTError(Exception):
    exit_code = 1


class ConfigError(NTTError, ValueError):
    exit_code = 2


class DataError(NTTError, ValueError):
    exit_code = 3


class NumericalError(NTTError, ArithmeticError):
    exit_code = 4
