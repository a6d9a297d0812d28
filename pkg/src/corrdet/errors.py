"""Exception types shared across the package."""


class CorrdetError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(CorrdetError):
    """A domain invariant was violated at construction or validation time."""


class BoxOutOfBounds(ValidationError):
    pass


class DuplicateSupportClass(ValidationError):
    pass


class ShotCountMismatch(ValidationError):
    pass


class ImageTooSmall(ValidationError):
    pass


class DegenerateBox(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class OddDimension(ValidationError):
    pass


class EmptyRegion(ValidationError):
    pass


class TooManyObjects(ValidationError):
    pass


class UnknownEncodingIndex(ValidationError):
    pass


class AssignmentInvalid(ValidationError):
    pass


class NonFiniteCost(CorrdetError):
    pass


class NonFiniteLoss(CorrdetError):
    pass


class InsufficientClasses(CorrdetError):
    pass


class InsufficientShots(CorrdetError):
    pass


class MissingClassSupport(CorrdetError):
    pass


class StageMismatch(CorrdetError):
    pass
