"""Exception hierarchy.

Input problems derive from :class:`InputError` (the CLI maps them to exit
code 2); numerical breakdowns derive from :class:`NumericalError` (exit 3).
"""


class MmcdlError(Exception):
    pass


class InputError(MmcdlError, ValueError):
    pass


class DimensionError(InputError):
    pass


class LayoutError(InputError):
    pass


class FormatError(InputError):
    pass


class ChecksumError(FormatError):
    pass


class IngestionError(InputError):
    pass


class NumericalError(MmcdlError, ArithmeticError):
    pass


class DegenerateAtomError(NumericalError):
    pass


class NoUsableAtomError(NumericalError):
    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column
