"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SlamFormerError(Exception):
    exit_code = 1


class ConfigError(SlamFormerError, ValueError):
    exit_code = 2


class DataIOError(SlamFormerError, OSError):
    exit_code = 3


class ContractError(SlamFormerError):
    exit_code = 4


class DimensionError(ContractError, ValueError):
    pass


class NumericError(ContractError, FloatingPointError):
    """Raised when an op would produce NaN/Inf from finite inputs."""


class OrderingError(ContractError):
    pass


class BoundsError(ContractError, IndexError):
    pass


class EstimationError(ContractError):
    pass


class RankError(ContractError):
    pass


class EvaluationError(ContractError):
    pass
