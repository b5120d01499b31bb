"""Exception types shared across the package."""


class PpxError(Exception):
    """Base class for all package errors."""


class MalformedRequest(PpxError):
    """Raw bytes do not contain a syntactically valid HTTP/1.1 request."""


class ShapeMismatch(PpxError):
    """Sketch geometries differ where identical shapes are required."""


class DecodeError(PpxError):
    """Wire payload failed to decode.

    Carries a human-readable position: either a byte offset (JSON syntax
    errors) or a field path (structural errors).
    """

    def __init__(self, message: str, position: str = ""):
        self.position = position
        super().__init__(f"{message} (at {position})" if position else message)


class SidMismatch(PpxError):
    """Two signatures with different SIDs were merged."""


class KeyAbsent(PpxError):
    """Requested key has no sketch in the signature."""


class RewriteUnsupported(PpxError):
    """A filter rule targets a value inside an unparseable raw body."""
