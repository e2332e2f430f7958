"""Exception types shared across the engine."""


class FtrainError(Exception):
    """Base class for all engine errors."""


class ShapeMismatch(FtrainError):
    pass


class TokenOutOfRange(FtrainError):
    pass


class SequenceTooLong(FtrainError):
    pass


class DegenerateRow(FtrainError):
    """A normalization row has zero variance and no epsilon to rescue it."""


class AllMaskedRow(FtrainError):
    """A softmax row has no unmasked element."""


class TargetOutOfRange(FtrainError):
    pass


class IncompleteGradientSet(FtrainError):
    """Cross-attention backward was asked to finalize before every layer contributed."""


class DuplicateName(FtrainError):
    pass


class NonFiniteGradient(FtrainError):
    """Raised only when a non-finite gradient cannot be handled by skipping."""


class UntaggedTensor(FtrainError):
    pass


class ParseError(FtrainError):
    pass


class ConfigError(FtrainError):
    pass


class DataError(FtrainError):
    pass
