"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes or sequence lengths incompatible with an operation."""


class EmptySequenceError(ValueError):
    """An operation received a sequence or mask with no valid positions."""


class ContractError(ValueError):
    """An operation was called outside its contract (bad arguments, empty inputs)."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared where the computation requires finite numbers."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; message names the offending field."""


class VocabularyError(ValueError):
    """A token or id is not present in the vocabulary."""


class FormatError(ValueError):
    """A serialized artifact (checkpoint, embedding file) is malformed."""


class AlignmentError(ValueError):
    """Paired inputs disagree in length or alignment."""


class DegenerateDataError(ValueError):
    """Input data is degenerate for the requested statistic (zero vector/variance)."""
