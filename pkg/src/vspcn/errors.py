"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration, dataset, and
checkpoint problems exit 2; numeric failures exit 3.
"""


class ShapeError(ValueError):
    """Operand dimensions are incompatible; message carries both shapes."""


class NumericError(ArithmeticError):
    """A kernel produced or was handed a non-finite value."""


class ConfigError(ValueError):
    """A run configuration is malformed or violates an invariant."""


class DatasetFormatError(ValueError):
    """A dataset file is unreadable: bad magic, truncation, or parse failure."""


class CheckpointError(ValueError):
    """A checkpoint file is unreadable or inconsistent with the model."""


class TrainingAbort(RuntimeError):
    """Training stopped on a non-finite loss; carries the last-good checkpoint path."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
