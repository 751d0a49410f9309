class ContractError(ValueError):
    """Raised when an operation is called with inputs violating its
    pre-conditions (negative widths, empty depth sets, shape mismatches)."""


class DegenerateCropError(ContractError):
    """FOV crop collapsed to less than one pixel."""


class ConfigError(ValueError):
    """Invalid run config.

    :param str message: Error message
    :param list[str] details: Individual validation errors
    """

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or []


class CheckpointError(Exception):
    """Unreadable checkpoint or checkpoint incompatible with a config."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or Inf loss.

    :param int epoch: Epoch of failing step
    :param int step: Global step of failing step
    :param dict breakdown: Loss components at failing step
    """

    def __init__(self, epoch, step, breakdown):
        super().__init__(
            "Non-finite loss at epoch %d, step %d: %s" % (epoch, step, breakdown)
        )
        self.epoch = epoch
        self.step = step
        self.breakdown = breakdown


class DatasetError(Exception):
    """Base class for RGB-D ingestion errors.

    :param str path: Offending file path
    """

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class MissingFileError(DatasetError):
    pass


class UnreadableRasterError(DatasetError):
    pass


class MissingIntrinsicsError(DatasetError):
    pass


class RegistrationError(DatasetError):
    pass
