"""Exception hierarchy shared by every module.

The CLI maps these to exit codes: usage problems exit 1, bad input data
exits 2, numeric blow-ups exit 3.
"""


class PascError(Exception):
    exit_code = 2


class UsageError(PascError):
    exit_code = 1


class DimensionError(PascError, ValueError):
    exit_code = 1


class DataError(PascError):
    exit_code = 2


class FormatError(DataError):
    pass


class VocabularyError(DataError):
    pass


class StratificationError(DataError):
    pass


class MetricError(DataError):
    pass


class NoCovidEventError(DataError):
    pass


class NumericError(PascError):
    exit_code = 3
