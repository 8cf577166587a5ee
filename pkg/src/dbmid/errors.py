"""Exception hierarchy shared by every dbmid module."""


class DbmidError(Exception):
    """Base class for all errors raised by dbmid."""


class ArgumentError(DbmidError, ValueError):
    pass


class FormatError(DbmidError, ValueError):
    """Unsupported image bit depth or channel layout."""


class RegistrationError(DbmidError):
    pass


class DatasetError(DbmidError):
    pass


class ConfigurationError(DbmidError):
    pass


class CheckpointError(DbmidError):
    pass


class NumericError(DbmidError, ArithmeticError):
    """Non-finite values appeared during a computation."""
