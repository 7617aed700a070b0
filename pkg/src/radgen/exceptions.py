"""Error types raised across the package.

Each error carries a stable ``code`` prefix used on the CLI diagnostic
stream and an ``exit_code`` mapped onto the process exit status.
"""


class RadgenError(Exception):
    code = "E000"
    exit_code = 1


class UsageError(RadgenError, ValueError):
    code = "E100"
    exit_code = 1


class ConfigError(UsageError):
    code = "E101"


class DimensionError(RadgenError, ValueError):
    code = "E102"
    exit_code = 1


class DataError(RadgenError, ValueError):
    code = "E200"
    exit_code = 2


class FormatError(DataError):
    code = "E201"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VocabRangeError(DataError, IndexError):
    code = "E202"


class RetrievalError(DataError):
    code = "E203"


class CheckpointMismatchError(DataError):
    code = "E204"


class NumericalError(RadgenError, ArithmeticError):
    code = "E300"
    exit_code = 3


class DegenerateInputError(NumericalError, ValueError):
    code = "E301"


class TrainingError(NumericalError):
    code = "E302"
