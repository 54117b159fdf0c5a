"""Exception types; the CLI maps each family to an exit code."""


class GeorankError(Exception):
    exit_code = 1


class ConfigError(GeorankError, ValueError):
    exit_code = 2


class DataError(GeorankError, ValueError):
    exit_code = 3


class ShapeError(DataError):
    """Operand shapes or dimensions are inconsistent."""


class NumericalError(GeorankError, ArithmeticError):
    exit_code = 4
