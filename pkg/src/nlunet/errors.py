"""Exception hierarchy.

Every error carries a short machine-readable ``code`` and the process exit
status the CLI maps it to.
"""


class NLUNetError(Exception):
    code = "error"
    exit_status = 1


class ConfigError(NLUNetError, ValueError):
    code = "config"
    exit_status = 2


class ResourceError(ConfigError):
    """Raised when an allocation would exceed a configured budget."""

    code = "resource"


class DataError(NLUNetError, ValueError):
    code = "data"
    exit_status = 3


class ShapeError(DataError):
    """Incompatible tensor or volume extents."""

    code = "shape"


class VolumeIOError(DataError):
    code = "io"


class UndefinedMetricError(DataError):
    """A metric is undefined for the given inputs (e.g. both maps empty)."""

    code = "undefined_metric"


class NumericError(NLUNetError, ArithmeticError):
    code = "numeric"
    exit_status = 4


class ContractError(NLUNetError, RuntimeError):
    """Caller violated an API precondition."""

    code = "contract"
    exit_status = 2


class CheckpointError(ConfigError):
    code = "checkpoint"
