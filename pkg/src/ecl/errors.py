"""Exception hierarchy shared across the package."""


class EclError(Exception):
    """Base class for all package errors."""


class ConfigError(EclError, ValueError):
    """Invalid configuration or user input."""


class GenomeError(EclError, ValueError):
    pass


class GenomeFormatError(GenomeError):
    """Genome text could not be parsed or has the wrong shape."""


class UnknownOpError(GenomeError):
    pass


class InvariantViolationError(GenomeError):
    """A genome breaks a structural invariant (node bounds, wiring)."""


class MalformedGenomeError(GenomeError):
    """Cycle or out-of-range reference found while canonicalizing."""


class PopulationStateError(EclError, RuntimeError):
    pass


class ShapeError(EclError, ValueError):
    pass


class DivergenceError(EclError, RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class DatasetError(EclError, ValueError):
    pass


class EmptyClassError(DatasetError):
    pass


class UnreadableFileError(DatasetError):
    pass


class DuplicatePathError(DatasetError):
    pass


class UnknownTaskError(EclError, KeyError):
    pass
