"""Error categories; the CLI maps each to an exit status."""


class RetreeError(Exception):
    exit_code = 1


class ConfigError(RetreeError, ValueError):
    exit_code = 2


class DataError(RetreeError, ValueError):
    exit_code = 3


class NumericError(RetreeError, ArithmeticError):
    exit_code = 4
