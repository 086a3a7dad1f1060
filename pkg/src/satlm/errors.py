"""Exception hierarchy shared by every satlm module."""


class SatlmError(Exception):
    """Base class for all domain errors raised by satlm."""


class ShapeError(SatlmError, ValueError):
    pass


class NumericError(SatlmError, ArithmeticError):
    pass


class ContractError(SatlmError, ValueError):
    pass


class ConfigError(SatlmError, ValueError):
    pass


class VocabularyError(SatlmError, ValueError):
    pass


class TruncationError(SatlmError, ValueError):
    pass


class ParseError(SatlmError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidityError(SatlmError, ValueError):
    pass


class DataError(SatlmError, ValueError):
    pass


class AlignmentError(SatlmError, ValueError):
    pass


class SamplingError(SatlmError, ValueError):
    pass


class ModeError(SatlmError, ValueError):
    pass


class FormatError(SatlmError, ValueError):
    pass


class IntegrityError(SatlmError, ValueError):
    pass
