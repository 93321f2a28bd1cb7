"""Exception hierarchy shared by every module.

Each error carries a ``category`` and an ``exit_code`` so ``main`` can report
failures without knowing where they were raised.
"""


class CtxDiffError(Exception):
    category = "error"
    exit_code = 1


class ParameterError(CtxDiffError, ValueError):
    category = "parameter"
    exit_code = 3


class ScheduleError(ParameterError):
    category = "schedule"


class SizeError(ParameterError):
    category = "size"


class ShapeError(CtxDiffError, ValueError):
    category = "shape"
    exit_code = 3


class ConfigError(CtxDiffError, ValueError):
    category = "config"
    exit_code = 3


class InconsistencyError(CtxDiffError):
    category = "inconsistency"
    exit_code = 6


class NumericError(CtxDiffError, FloatingPointError):
    category = "numeric"
    exit_code = 6


class DivergenceError(NumericError):
    category = "divergence"


class SamplerInvariantError(CtxDiffError, RuntimeError):
    category = "sampler"
    exit_code = 6


class ContextHeadInvokedError(SamplerInvariantError):
    category = "context-head"


class DatasetError(CtxDiffError):
    category = "dataset"
    exit_code = 4


class CheckpointError(CtxDiffError):
    category = "checkpoint"
    exit_code = 5


class CheckpointVersionError(CheckpointError):
    category = "checkpoint-version"


class ConfigMismatchError(CheckpointError):
    category = "config-mismatch"
