"""Exception types shared across the package."""


class EQFaceError(Exception):
    """Base class for all package errors."""


class ZeroVector(EQFaceError):
    """Vector norm is below the zero guard; normalization is undefined."""


class DimensionMismatch(EQFaceError):
    """Operand shapes are incompatible."""


class InvalidConfig(EQFaceError):
    """A configuration object violates its invariants."""


class InsufficientData(EQFaceError):
    """Dataset is too small for the requested split."""


class MissingCache(EQFaceError):
    """Backward pass requested without cached forward intermediates."""


class InvalidQuality(EQFaceError):
    """Quality scalar outside the admissible range."""


class ShapeMismatch(EQFaceError):
    """Gradient/parameter shapes disagree in an optimizer update."""


class DivergenceDetected(EQFaceError):
    """Training loss became non-finite for several consecutive batches."""


class IncompleteQualityTable(EQFaceError):
    """Quality table does not cover every training sample."""


class EmptyInput(EQFaceError):
    """An aggregation or metric received no records."""


class ZeroQualityMass(EQFaceError):
    """Sum of quality weights underflowed; weighted mean is undefined."""


class InsufficientPairs(EQFaceError):
    """Not enough genuine/impostor pairs to evaluate at all."""


class NoInGalleryQueries(EQFaceError):
    """No query identity is present in the reference gallery."""


class CheckpointError(EQFaceError):
    """Checkpoint file is malformed or has an unsupported version."""
