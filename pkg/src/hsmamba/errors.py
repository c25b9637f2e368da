"""Exception types raised across the package."""


class HSMambaError(Exception):
    pass


class DimensionError(HSMambaError, ValueError):
    """Operand extents are incompatible."""


class ParameterError(HSMambaError, ValueError):
    """A scalar argument is out of its admissible range."""


class ConfigurationError(HSMambaError, ValueError):
    pass


class ModeError(HSMambaError, ValueError):
    """An operation was called in a regime it does not support."""


class FormatError(HSMambaError, ValueError):
    """A binary or text file does not follow its declared layout."""


class SplitError(HSMambaError, ValueError):
    pass


class NonFiniteError(HSMambaError, FloatingPointError):
    """A primitive produced NaN or Inf from finite inputs."""


class DivergenceError(HSMambaError, RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss
