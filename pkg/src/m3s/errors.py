"""Exception hierarchy shared by every stage of the pipeline.

Each class name doubles as the structured error name the CLI prints on
stderr, so keep them stable.
"""


class M3SError(Exception):
    """Base class for all pipeline errors."""


class InputError(M3SError, ValueError):
    """Bad input data or configuration (CLI exit code 2)."""


class ConstantSequence(InputError):
    pass


class NonFinite(InputError):
    pass


class InvalidGroups(InputError):
    pass


class DomainError(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class SchemaError(ParseError):
    pass


class EmptySplit(InputError):
    pass


class InvalidConfig(InputError):
    def __init__(self, message, field=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class ShapeError(InputError):
    pass


class UnlabeledSample(InputError):
    pass


class LengthMismatch(InputError):
    pass


class EmptyInput(InputError):
    pass


class EmptyMatrix(EmptyInput):
    pass


class DivergedLoss(M3SError, ArithmeticError):
    """Training loss became NaN or infinite (CLI exit code 3)."""
