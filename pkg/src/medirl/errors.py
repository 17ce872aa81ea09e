"""Exception hierarchy. Each class carries a short category used by the CLI."""


class MedirlError(Exception):
    category = "error"


class ConfigError(MedirlError, ValueError):
    category = "config"


class ValidationError(MedirlError, ValueError):
    category = "validation"


class TensorFormatError(MedirlError, IOError):
    category = "format"


class DataError(MedirlError, ValueError):
    category = "data"


class NumericalError(MedirlError, ArithmeticError):
    category = "numeric"
