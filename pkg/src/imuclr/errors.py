"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An operand's dimensions are incompatible with an operation."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


class EmptyBatchError(ValueError):
    """A batch-level operation received too few samples."""


class ContractViolationError(ValueError):
    """A caller-side precondition (e.g. unit-norm rows) does not hold."""


class DegenerateEmbeddingError(ValueError):
    """A vector about to be normalized has (near-)zero norm."""


class EmptyQueueError(LookupError):
    """Retrieval was attempted on an empty feature queue."""


class TrainingDivergenceError(RuntimeError):
    """Non-finite values appeared during optimization.

    `checkpoint_path` points at the last good parameter snapshot when the
    training loop managed to write one, else None.
    """

    def __init__(self, message: str, checkpoint_path: str | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class DataError(ValueError):
    """A dataset does not satisfy the requirements of an operation."""


class ParseError(ValueError):
    """An input file could not be parsed; carries a 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CorruptDatasetError(RuntimeError):
    """An on-disk dataset or checkpoint failed an integrity check."""
