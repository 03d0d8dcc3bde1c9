"""Exception hierarchy.

Input problems derive from :class:`InputError` and numerical breakdowns from
:class:`NumericalError`; the CLI maps them to exit codes 2 and 3.
"""


class MFVarError(Exception):
    pass


class InputError(MFVarError, ValueError):
    pass


class NumericalError(MFVarError, ArithmeticError):
    pass


class DimensionMismatch(InputError):
    pass


class MaskInconsistent(InputError):
    pass


class EmptyStore(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, row=None, col=None):
        self.row = row
        self.col = col
        if row is not None:
            message = f"{message} (row {row}, column {col!r})"
        super().__init__(message)


class ConfigError(InputError):
    def __init__(self, key, message=None):
        self.key = key
        super().__init__(key if message is None else f"{key}: {message}")


class NotPositiveDefinite(NumericalError):
    pass


class SingularW(NumericalError):
    pass


class SingularDesign(NumericalError):
    pass


class FilterDivergence(NumericalError):
    pass


class NonStationary(NumericalError):
    pass
