"""Exception types shared across the package."""


class SliceDistillError(Exception):
    """Base class for all package errors."""


class FormatError(SliceDistillError):
    """A file does not conform to the supported format subset."""


class BadMagic(FormatError):
    pass


class UnsupportedDatatype(FormatError):
    pass


class TruncatedData(FormatError):
    pass


class NonFinite(SliceDistillError):
    """NaN or Inf encountered where finite values are required."""


class SizeTooSmall(SliceDistillError):
    pass


class NonPositiveArgument(SliceDistillError):
    pass


class NoModalities(SliceDistillError):
    pass


class IndexOutOfRange(SliceDistillError):
    pass


class SliceTooSmall(SliceDistillError):
    pass


class NonScalarLoss(SliceDistillError):
    pass


class NaNGradient(SliceDistillError):
    """Carries the id of the op whose gradient went non-finite."""


class ShapeMismatch(SliceDistillError):
    pass


class IndivisibleInput(SliceDistillError):
    pass


class MismatchedViewCounts(SliceDistillError):
    pass


class EmptyBatch(SliceDistillError):
    pass


class LeakageDetected(SliceDistillError):
    """Evaluation data overlapped with training or pretraining data."""


class TooFewSubjects(SliceDistillError):
    pass


class SingleClass(SliceDistillError):
    pass


class EmptyMask(SliceDistillError):
    pass


class DegenerateLabels(SliceDistillError):
    pass


class EmptyClassAtFraction(SliceDistillError):
    pass


class NoSlices(SliceDistillError):
    pass
