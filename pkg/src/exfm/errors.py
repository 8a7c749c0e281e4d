"""Exception types shared across the package."""


class ExfmError(Exception):
    """Base class for all errors raised by this package."""


class SingularMatrix(ExfmError):
    """A Gram matrix was too ill-conditioned to solve reliably."""


class DimensionMismatch(ExfmError, ValueError):
    pass


class MissingSupervision(ExfmError):
    """A distillation mode was requested for an example without a pseudo-label."""


class DegenerateWindow(ExfmError):
    """A metric was requested on a window that lacks one of the label classes."""


class NotConverged(ExfmError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


class InsufficientGrid(ExfmError):
    pass


class LateFeedback(ExfmError):
    """Feedback arrived after the row's window closed."""


class NoSnapshotInstalled(ExfmError):
    pass


class CasLost(ExfmError):
    """Compare-and-set on the metadata register lost a race; benign."""


class ConfigError(ExfmError):
    pass
