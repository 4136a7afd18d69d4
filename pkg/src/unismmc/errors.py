"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A spec, config file, or hyperparameter violates its invariants."""


class ShapeError(ValueError):
    """Tensor shapes or batch rows do not line up; message names both sides."""


class DataError(ValueError):
    """Data content is invalid, e.g. a label outside [0, K)."""


class DegenerateInputError(ValueError):
    """A representation row has (near-)zero norm where a direction is required."""


class FormatError(ValueError):
    """A persisted file is not a valid container: bad magic, version, or checksum."""


class GraphStateError(RuntimeError):
    """A computation graph was used after its backward pass consumed it."""


class TrainingDiverged(RuntimeError):
    """A loss or gradient went non-finite; carries partial metrics when available."""

    def __init__(self, message, metrics=None):
        super().__init__(message)
        self.metrics = metrics
