"""Exception types shared across the package."""


class MixsingError(Exception):
    """Base class for all package errors."""


class DimensionError(MixsingError, ValueError):
    pass


class ParameterError(MixsingError, ValueError):
    pass


class DegenerateInputError(MixsingError, ValueError):
    pass


class NumericError(MixsingError, ArithmeticError):
    pass


class FormatError(MixsingError, ValueError):
    pass


class AlignmentError(MixsingError, ValueError):
    pass


class InputError(MixsingError, ValueError):
    pass


class RangeError(MixsingError, ValueError):
    pass


class VocabError(MixsingError, ValueError):
    pass


class CapabilityError(MixsingError):
    """Raised when an operation needs a model component that is absent."""


class ConfigError(MixsingError, ValueError):
    pass
