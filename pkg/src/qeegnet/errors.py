"""Exception hierarchy shared by all qeegnet modules."""


class QEEGError(Exception):
    """Base class for every error raised by qeegnet."""


class ConfigurationError(QEEGError, ValueError):
    """Invalid configuration or arguments."""


class ShapeError(QEEGError, ValueError):
    """Array shapes do not match what an operation expects."""


class BuildError(ConfigurationError):
    """A model graph could not be assembled; ``layer`` names the culprit."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


class FormatError(QEEGError):
    """File does not start with the expected magic header."""


class CorruptionError(QEEGError):
    """File is truncated or fails its checksum."""


class UnsupportedOperationError(QEEGError):
    pass


class StateError(QEEGError, RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class TrainingError(QEEGError, RuntimeError):
    """Numerical failure during training (non-finite loss or gradient)."""


class ArchitectureMismatchError(QEEGError):
    def __init__(self, differences: list[str]):
        super().__init__("architecture mismatch:\n  " + "\n  ".join(differences))
        self.differences = differences
