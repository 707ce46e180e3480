class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An input violates an operation's precondition."""


class UndefinedStateError(RuntimeError):
    """Moment estimates were read before any update."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or has an unsupported version."""


class ConfigError(ValueError):
    """Training configuration is invalid."""


class DatasetError(ValueError):
    """Dataset bytes or contents are invalid."""


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite during training."""
