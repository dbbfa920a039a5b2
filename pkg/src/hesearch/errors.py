"""Exception hierarchy shared across the package."""


class HESearchError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(HESearchError, ValueError):
    """Invalid or inconsistent scheme/protocol parameters."""


class PlaintextRangeError(HESearchError, ValueError):
    """Plaintext is NaN/Inf or exceeds the configured bound."""


class BackendMismatchError(HESearchError, TypeError):
    """Operands from different backends (or wrong params) were mixed."""


class LevelMismatchError(HESearchError, ValueError):
    """Ciphertext levels differ and strict level checking is enabled."""


class ScaleMismatchError(HESearchError, ValueError):
    """Additive operands carry incompatible encoding scales."""


class DepthExhaustedError(HESearchError, ValueError):
    """No multiplicative depth left (ciphertext already at level 0)."""


class SerializationError(HESearchError, ValueError):
    """Malformed ciphertext, key, dataset, or message bytes."""


class HeapIndexError(HESearchError, IndexError):
    """Heap index outside the valid node range for the tree."""


class ProtocolError(HESearchError):
    """Protocol violation, either detected locally or via an Error frame."""

    def __init__(self, code: int, detail: str):
        super().__init__(f"protocol error {code}: {detail}")
        self.code = code
        self.detail = detail


class InconsistencyError(HESearchError):
    """Robust descent found no child below the zero threshold under a
    zero parent, which signals a noise/threshold failure."""


class TransportError(HESearchError, OSError):
    """Connection-level failure."""


class FrameTooLargeError(TransportError):
    """Declared or outgoing frame exceeds the configured maximum."""


class TruncatedStreamError(TransportError):
    """Peer closed the connection in the middle of a frame."""


class TransportTimeout(TransportError):
    """No complete frame arrived within the configured timeout."""
