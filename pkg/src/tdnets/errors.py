"""Exception hierarchy.

Everything raised on purpose derives from :class:`TDError`. Config problems
derive from :class:`InvalidConfig` and data problems from :class:`DataError`,
which lets the CLI map them to exit codes without listing every class.
"""


class TDError(Exception):
    pass


class ShapeMismatch(TDError, ValueError):
    pass


class AxisOutOfRange(TDError, IndexError):
    pass


class DuplicateAxis(TDError, ValueError):
    pass


class InvalidPermutation(TDError, ValueError):
    pass


class SizeMismatch(TDError, ValueError):
    pass


class NonScalarLoss(TDError, ValueError):
    pass


class LabelOutOfRange(TDError, ValueError):
    pass


class InvalidConfig(TDError, ValueError):
    pass


class RankListLengthMismatch(InvalidConfig):
    pass


class ModePairingRequired(InvalidConfig):
    pass


class NonPositiveExtent(InvalidConfig):
    pass


class UnsupportedFormat(InvalidConfig):
    pass


class InvalidCoreSet(TDError, ValueError):
    pass


class KernelLargerThanInput(ShapeMismatch):
    pass


class DataError(TDError):
    pass


class BadMagic(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


class VersionUnsupported(DataError):
    pass


class NumericalError(TDError, FloatingPointError):
    """Loss became NaN/Inf during training."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.value = value


class IoError(DataError, OSError):
    pass
