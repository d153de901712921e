"""Exception hierarchy. Each family maps onto one CLI exit code."""


class HeartBertError(Exception):
    exit_code = 1


class ConfigError(HeartBertError, ValueError):
    exit_code = 2


class ParameterError(ConfigError):
    """Invalid argument value (negative rate, too-small vocab, ...)."""


class MissingArtifactError(HeartBertError, FileNotFoundError):
    exit_code = 3


class DataValidationError(HeartBertError, ValueError):
    exit_code = 4


class FormatError(DataValidationError):
    pass


class EmptyInputError(DataValidationError):
    pass


class DomainError(DataValidationError):
    pass


class SymbolError(DataValidationError):
    pass


class TokenIdError(DataValidationError):
    pass


class DegenerateDataError(DataValidationError):
    pass


class NumericalError(HeartBertError, ArithmeticError):
    exit_code = 5
