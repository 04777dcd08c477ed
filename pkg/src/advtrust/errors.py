"""Exception hierarchy shared across the package."""


class AdvTrustError(Exception):
    """Base class for every error raised by advtrust."""


class ShapeError(AdvTrustError, ValueError):
    pass


class LabelError(AdvTrustError, ValueError):
    pass


class ConfigError(AdvTrustError, ValueError):
    pass


class PreconditionError(AdvTrustError, ValueError):
    pass


class BandError(AdvTrustError, ValueError):
    pass


class NumericError(AdvTrustError, ArithmeticError):
    pass


class TrainingDiverged(AdvTrustError, ArithmeticError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class FormatError(AdvTrustError, ValueError):
    """Malformed file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.path = path


class VersionError(FormatError):
    pass


class DegeneratePartitionError(AdvTrustError, ValueError):
    pass


class UndefinedMetricError(AdvTrustError, ValueError):
    pass


class BudgetError(AdvTrustError, ValueError):
    pass
