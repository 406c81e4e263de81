"""Exception hierarchy shared by every module."""


class RetargetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(RetargetError, ValueError):
    pass


class DegenerateRotation(RetargetError, ValueError):
    pass


class NotARotation(RetargetError, ValueError):
    pass


class NonWatertightBody(RetargetError):
    pass


class UnknownJoint(RetargetError, KeyError):
    pass


class DegenerateCamera(RetargetError, ValueError):
    pass


class ServiceUnavailable(RetargetError):
    pass


class ServiceProtocolError(RetargetError):
    pass


class EmbeddingWidthMismatch(RetargetError):
    pass


class InsufficientSamples(RetargetError, ValueError):
    pass


class DataEmpty(RetargetError, ValueError):
    pass


class DivergenceDetected(RetargetError, FloatingPointError):
    pass


class BackendNotDifferentiable(RetargetError):
    pass


class PairMismatch(RetargetError, ValueError):
    pass


class SchemaViolation(RetargetError, ValueError):
    pass
