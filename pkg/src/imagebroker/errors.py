"""Exception hierarchy shared across the package."""


class ImageBrokerError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(ImageBrokerError):
    """A configuration or filter-bank parameter violates its constraints."""


class InputError(ImageBrokerError):
    """An input image or request payload is malformed or undecodable."""


class DecodeError(ImageBrokerError):
    """Wire bytes cannot be decoded (truncated, unknown version/kind, trailing data)."""


class ComparisonError(ImageBrokerError):
    """Two feature vectors are not comparable (grid dimensions differ)."""


class ContractError(ImageBrokerError):
    """An operation was called with input violating its contract (e.g. unnormalized feature)."""


class TrustError(ImageBrokerError):
    """Certificate verification failed.

    ``reason`` is one of: "expired", "unknown-issuer", "bad-mac", "missing".
    """

    def __init__(self, reason: str, message: str = ""):
        self.reason = reason
        super().__init__(message or f"certificate rejected: {reason}")


class SessionError(ImageBrokerError):
    """Unknown, duplicate or expired broker session."""


class NotFoundError(ImageBrokerError):
    """A requested image id (or other resource) does not exist."""


class AccessDeniedError(ImageBrokerError):
    """License validation failed for a full-image retrieval."""


class CapacityError(ImageBrokerError):
    """Watermark payload does not fit in the target image."""


class NetworkError(ImageBrokerError):
    """A remote peer is unreachable or answered with a transport-level failure."""
