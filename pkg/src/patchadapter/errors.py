"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for every error this package raises on purpose."""


# --- container / file format ---

class BadMagic(EngineError):
    pass


class UnsupportedVersion(EngineError):
    pass


class InvalidHeader(EngineError):
    """Header fields describe an impossible or unsupported container."""


class TruncatedPayload(EngineError):
    """Header promises more bytes than the file holds."""


class DuplicateId(EngineError):
    pass


class IdCountMismatch(EngineError):
    """Sidecar line count disagrees with the container header."""


class ClassCountMismatch(EngineError):
    pass


class NonPositiveTemperature(EngineError):
    pass


class UnknownClassName(EngineError):
    pass


class DuplicateImageId(EngineError):
    pass


class MalformedRow(EngineError):
    pass


class UnknownImageId(EngineError):
    pass


class ShapeMismatch(EngineError):
    pass


# --- math / training ---

class ZeroVectorInCosineMode(EngineError):
    """Cosine classification asked to normalize a near-zero vector."""


class TraceMismatch(EngineError):
    """Backward pass fed a trace that does not belong to these parameters."""


class ZeroCount(EngineError):
    pass


class EmptyInput(EngineError):
    pass


class EmptyTrainSet(EngineError):
    pass


class UnknownAttribute(EngineError):
    pass


# --- metrics ---

class LabelOutOfRange(EngineError):
    pass


class LengthMismatch(EngineError):
    pass


class EmptyMatrix(EngineError):
    pass


class ZeroSupportClass(EngineError):
    pass
