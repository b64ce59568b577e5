"""Exception hierarchy.

Data problems (bad files, inconsistent shapes) derive from :class:`DataError`;
numerical failures derive from :class:`NumericError`. The CLI maps these to
exit codes 2 and 3 respectively.
"""


class StructReidError(Exception):
    pass


class DataError(StructReidError, ValueError):
    pass


class NumericError(StructReidError, ArithmeticError):
    pass


class ParseError(DataError):
    pass


class MissingFile(DataError, FileNotFoundError):
    pass


class ResolutionMismatch(DataError):
    pass


class PatchTooLarge(DataError):
    pass


class TooFewSamples(DataError):
    pass


class DimensionMismatch(DataError):
    pass


# Several modules speak of "DimMismatch"; same thing.
DimMismatch = DimensionMismatch


class EmptyEntity(DataError):
    pass


class IndexOutOfRange(DataError, IndexError):
    pass


class MissingDescriptor(DataError, KeyError):
    pass


class InfeasibleSpec(DataError):
    pass


class NonFiniteScore(NumericError):
    pass


class Divergence(NumericError):
    pass
