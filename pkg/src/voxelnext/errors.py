"""Exception hierarchy shared by all modules."""


class VoxelNextError(Exception):
    """Base class for every error raised by this package."""


class ContractError(VoxelNextError, ValueError):
    """A caller violated an operation's precondition (bad shape, bad range, ...)."""


class StructuralError(VoxelNextError, RuntimeError):
    """The recorded autodiff graph is malformed (cycle, gradient shape mismatch)."""


class ConfigError(VoxelNextError, ValueError):
    """A configuration value is invalid; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class CheckpointError(VoxelNextError, IOError):
    """A checkpoint could not be written or restored."""


class VolumeFormatError(VoxelNextError, IOError):
    """A volume file is malformed, truncated or of an unsupported version."""


class PlacementError(VoxelNextError, RuntimeError):
    """Phantom generation could not place every requested structure."""


class TrainingDivergedError(VoxelNextError, FloatingPointError):
    """The training loss became non-finite."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
