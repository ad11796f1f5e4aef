"""Exception types raised across the package."""


class AmgError(Exception):
    """Base class for every error raised by amgprune."""


class DimensionError(AmgError, ValueError):
    pass


class NumericInputError(AmgError, ValueError):
    pass


class ContractError(AmgError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ClassTokenProtectionError(ContractError):
    """Something tried to score or drop the class token."""


class DegenerateLayerError(ContractError):
    """Head surgery would leave a layer with no heads."""


class NotCalibratedError(AmgError, RuntimeError):
    pass


class ConfigError(AmgError, ValueError):
    pass


class InfeasiblePlanError(AmgError, RuntimeError):
    """The requested pruning rate cannot be met without breaking a per-layer floor."""

    def __init__(self, message, binding_layers=()):
        super().__init__(message)
        self.binding_layers = list(binding_layers)


class DivergenceError(AmgError, RuntimeError):
    """Training produced a non-finite loss.

    ``last_good`` holds the parameter snapshot taken at the start of the
    failing epoch (name -> ndarray), already restored into the model.
    """

    def __init__(self, message, epoch=None, last_good=None):
        super().__init__(message)
        self.epoch = epoch
        self.last_good = last_good


class CheckpointError(AmgError, ValueError):
    pass
