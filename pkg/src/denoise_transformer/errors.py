"""Exception types shared across the package."""


class DenoiseError(Exception):
    pass


class ShapeError(DenoiseError, ValueError):
    pass


class ConfigError(DenoiseError, ValueError):
    pass


class StateError(DenoiseError, RuntimeError):
    pass


class NumericalError(DenoiseError, ArithmeticError):
    pass


class FormatError(DenoiseError, ValueError):
    pass
