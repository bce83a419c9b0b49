"""Exception hierarchy shared by every module."""


class DynFusionError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DynFusionError, ValueError):
    pass


class ShapeError(DynFusionError, ValueError):
    pass


class ConfigError(DynFusionError, ValueError):
    pass


class NumericError(DynFusionError, ArithmeticError):
    """A forward op produced NaN or Inf."""


class ContractError(DynFusionError, RuntimeError):
    pass


class StageOrderError(ContractError):
    """A training stage was requested before its prerequisites ran."""


class DataError(DynFusionError):
    pass


class ManifestError(DataError):
    pass


class UnsupportedFormatError(DataError):
    pass


class CheckpointError(DataError):
    pass
