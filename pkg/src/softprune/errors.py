"""Exception hierarchy shared by every module."""


class SoftPruneError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SoftPruneError, ValueError):
    """Tensor shapes do not agree."""


class ConfigurationError(SoftPruneError, ValueError):
    """An invalid hyper-parameter, model spec or configuration file."""


class InputError(SoftPruneError, ValueError):
    """Bad user-supplied values (labels, indices, names)."""


class StateError(SoftPruneError, RuntimeError):
    """Operation not valid in the object's current mode."""


class StructuralError(SoftPruneError, ValueError):
    """A keep plan does not line up with the model graph."""


class FormatError(SoftPruneError, ValueError):
    """A data or model file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(SoftPruneError, RuntimeError):
    """Training diverged (non-finite loss or gradient)."""

    def __init__(self, message, checkpoint=None):
        if checkpoint is not None:
            message = f"{message}; last good checkpoint: {checkpoint}"
        super().__init__(message)
        self.checkpoint = checkpoint
