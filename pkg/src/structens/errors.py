"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConstructionError(ValueError):
    """A layer chain cannot be wired together."""


class BlueprintError(ValueError):
    """An extraction blueprint does not fit the network it is applied to."""


class DegenerateSaliencyError(RuntimeError):
    """Every saliency value is zero, so neurons cannot be ranked."""


class CapacityExhaustedError(RuntimeError):
    """Hard extraction found no free neuron left in some layer."""

    def __init__(self, layer: int, task: int | None = None):
        self.layer = layer
        self.task = task
        where = f"layer {layer}" if task is None else f"task {task}, layer {layer}"
        super().__init__(f"no free neurons left ({where})")


class FormatError(ValueError):
    """A data or model file is malformed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ConfigError(ValueError):
    """Experiment configuration failed validation."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
