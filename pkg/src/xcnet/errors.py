"""Exception hierarchy shared by all xcnet modules.

Exit codes used by the CLI: 0 success, 2 configuration error, 3 data error,
4 numeric error (NaN/Inf detected somewhere in a computation).
"""


class XcnetError(Exception):
    """Base class for all xcnet errors."""

    exit_code = 1


class ConfigError(XcnetError):
    """Invalid configuration: bad shapes, bad keys, incompatible networks."""

    exit_code = 2


class DataError(XcnetError):
    """Invalid data: bad labels, malformed files, unsatisfiable generation."""

    exit_code = 3


class FormatError(DataError):
    """Malformed serialized artifact (weight file, dataset file)."""


class EvalError(DataError):
    """Evaluation is undefined for the given inputs (e.g. zero ground truth)."""


class NumericError(XcnetError):
    """A NaN or Inf was produced where only finite values are allowed."""

    exit_code = 4
