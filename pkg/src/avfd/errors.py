"""Exception hierarchy shared across the package."""


class AVFDError(Exception):
    """Base class for every error raised by this package."""


class ParseError(AVFDError):
    """A file could not be parsed in its expected format."""


class ValidationError(AVFDError):
    """Structurally valid input that breaks a data contract."""


class ConfigError(AVFDError):
    """Unknown or malformed configuration key/value."""


class DimensionMismatch(AVFDError, ValueError):
    pass


class EmptySequence(AVFDError, ValueError):
    pass


class EmptyAudio(AVFDError, ValueError):
    pass


class EmptyPolarity(AVFDError, ValueError):
    pass


class EmptyBatch(AVFDError, ValueError):
    pass


class EmptyGroup(AVFDError, ValueError):
    pass


class EmptyImage(AVFDError, ValueError):
    pass


class NonFinite(AVFDError, ArithmeticError):
    pass


class SingleClass(AVFDError, ValueError):
    """Only one label present where a ranking metric needs both."""


class TooFewSamples(AVFDError, ValueError):
    pass


class InvalidSpec(AVFDError, ValueError):
    """Corruption spec with an out-of-range or unknown parameter."""
