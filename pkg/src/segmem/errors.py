"""Shared exception types."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or inconsistent."""


class ShapeError(ConfigError):
    """Tensor shapes do not satisfy an operation's contract."""


class NonFiniteError(RuntimeError):
    """A NaN or Inf was produced where only finite values are allowed."""


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable or does not match expectations."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; a last-good checkpoint was kept."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
