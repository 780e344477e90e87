"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ConfigurationError(ValueError):
    """A parameter or option is outside its legal domain."""


class ContractError(RuntimeError):
    """An API was driven outside its documented protocol."""


class InputError(ValueError):
    """Input data is structurally valid but unusable (e.g. image too small)."""


class DecodeError(ValueError):
    """A file could not be decoded; message carries a byte offset when known."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class CorruptionError(CheckpointError):
    """Checkpoint bytes fail integrity checks (truncation, CRC mismatch)."""


class FormatError(CheckpointError):
    """Checkpoint is intact but does not match the expected schema/config."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the recent loss history."""

    def __init__(self, step: int, lr: float, history: list[float]):
        self.step = step
        self.lr = lr
        self.history = list(history)
        tail = ", ".join(f"{v:.6g}" for v in history[-8:])
        super().__init__(
            f"non-finite loss at step {step} (lr={lr:.3g}); recent losses: [{tail}]"
        )
