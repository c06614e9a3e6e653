"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (bad mode, missing grad, ...)."""


class InputError(ValueError):
    """User-supplied data (tokens, corpus, seed text) is invalid."""


class ConfigError(ValueError):
    """A configuration value is inconsistent or out of range."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed or does not match the running config."""


class TrainingDiverged(RuntimeError):
    """Loss became NaN/Inf; carries a reference to the last good checkpoint."""

    def __init__(self, step: int, last_checkpoint: str | None):
        self.step = step
        self.last_checkpoint = last_checkpoint
        where = last_checkpoint if last_checkpoint else "<none written>"
        super().__init__(
            f"non-finite loss at step {step}; last good checkpoint: {where}"
        )
