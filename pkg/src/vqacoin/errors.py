"""Exception types shared across the package.

Each carries the CLI exit code it maps to so the command-line layer can
translate failures without string matching.
"""


class VqaCoinError(Exception):
    exit_code = 1


class ConfigError(VqaCoinError, ValueError):
    exit_code = 2


class DataError(VqaCoinError, ValueError):
    exit_code = 3


class NumericError(VqaCoinError, FloatingPointError):
    exit_code = 4


class DimensionError(VqaCoinError, ValueError):
    """Operand shapes are incompatible for the requested op."""

    exit_code = 4


class DegenerateMaskError(VqaCoinError, ValueError):
    """Every position of a normalized slice is masked out."""

    exit_code = 4


class ContractError(VqaCoinError, ValueError):
    """A documented precondition was violated by the caller."""

    exit_code = 4


class VocabularyError(DataError, IndexError):
    pass


class CheckpointError(VqaCoinError):
    exit_code = 3
