"""Exception hierarchy.

DataError maps to CLI exit code 2 (bad input data or config), NumericalError
to exit code 3 (degenerate numerics), StudyFailure to exit code 4.
"""


class CharfactorError(Exception):
    """Base class for all package errors."""


class DataError(CharfactorError):
    pass


class MissingColumn(DataError):
    def __init__(self, column):
        super().__init__(f"required column missing: {column!r}")
        self.column = column


class UnbalancedPanel(DataError):
    pass


class IncompatibleDimensions(DataError):
    pass


class NonPositiveWeight(DataError):
    pass


class NumericalError(CharfactorError):
    pass


class RankDeficientCharacteristics(NumericalError):
    def __init__(self, period, detail=""):
        msg = f"characteristic matrix is rank deficient at period {period}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.period = period


class DegenerateSpectrum(NumericalError):
    pass


class RankDeficientLoadings(NumericalError):
    def __init__(self, period):
        super().__init__(f"X_t @ gamma loses column rank at period {period}")
        self.period = period


class SingularFactorGram(NumericalError):
    pass


class DegenerateOrthoComplement(NumericalError):
    pass


class ZeroVariance(NumericalError):
    def __init__(self, cell):
        super().__init__(f"zero variance at tested cell {cell}")
        self.cell = cell


class SingularVariance(NumericalError):
    def __init__(self, row):
        super().__init__(f"singular variance matrix for loading row {row}")
        self.row = row


class StudyFailure(CharfactorError):
    pass
