class LabError(ValueError):
    """Base class for every error raised by psnr_lab."""


class MalformedInputError(LabError):
    """
    An input file or edge list does not follow the expected format.

    Args:
        message: What went wrong.
        path: The offending file, if any.
        line: 1-based line number inside `path`, if any.
    """

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class ConfigError(LabError):
    """A configuration value is outside its allowed range."""


class ShapeError(LabError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        shown = ", ".join(str(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")
        self.op = op
        self.shapes = shapes


class NumericError(LabError):
    """
    A computation produced NaN/Inf or a solve lost accuracy.

    Args:
        message: What went wrong.
        layer: Layer index the failure is attributed to, if any.
        epoch: Training epoch the failure happened in, if any.
    """

    def __init__(self, message: str, layer: int | None = None, epoch: int | None = None):
        parts = [message]
        if layer is not None:
            parts.append(f"layer={layer}")
        if epoch is not None:
            parts.append(f"epoch={epoch}")
        super().__init__(" ".join(parts))
        self.layer = layer
        self.epoch = epoch


class ContractError(LabError):
    """A caller broke a precondition (wrong state, wrong model kind, reused tape)."""


class RangeError(LabError):
    pass


class DomainError(LabError):
    pass


class SplitError(LabError):
    def __init__(self, message: str, label: int | None = None):
        super().__init__(message if label is None else f"class {label}: {message}")
        self.label = label


class ExperimentError(LabError):
    pass


class UndefinedMetricError(LabError):
    """A distance or metric is undefined for the given input (zero vector, empty set)."""
