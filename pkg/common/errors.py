"""
Error hierarchy shared by every stage.

The CLI maps each class onto a process exit code:
    0 success, 2 config error, 3 data error, 4 numeric error (1 for anything else).
"""


class SeqAugError(Exception):
    exit_code = 1


class ConfigError(SeqAugError):
    exit_code = 2


class DataError(SeqAugError, ValueError):
    exit_code = 3


class DimensionError(DataError):
    pass


class UndefinedSimilarityError(DataError):
    pass


class NumericError(SeqAugError, ArithmeticError):
    exit_code = 4


class StateError(SeqAugError):
    pass
