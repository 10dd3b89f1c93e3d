"""Exception hierarchy shared by every module."""


class FloodCNNError(Exception):
    pass


class ShapeError(FloodCNNError, ValueError):
    pass


class ConfigError(FloodCNNError, ValueError):
    pass


class NumericError(FloodCNNError, ArithmeticError):
    pass


class StateError(FloodCNNError, RuntimeError):
    pass


class DegenerateBatchError(FloodCNNError, ValueError):
    pass


class InputError(FloodCNNError, ValueError):
    pass


class LayoutError(FloodCNNError, FileNotFoundError):
    pass


class CheckpointError(FloodCNNError, IOError):
    pass


class BuildError(ShapeError):
    pass


class TrainingDiverged(FloodCNNError, RuntimeError):
    """Raised when the loss goes non-finite; carries the last finite weights."""

    def __init__(self, message, last_state=None, history=None):
        super().__init__(message)
        self.last_state = last_state
        self.history = history
