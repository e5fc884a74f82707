"""Exception types shared across pipeline stages."""


class CorruptArtifactError(ValueError):
    """A persisted artifact is truncated, malformed, or has a wrong version."""


class ArtifactMismatchError(ValueError):
    """An upstream artifact was produced under a different config/seed."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class BackendTransportError(RuntimeError):
    """The scoring backend could not be reached (after retries)."""


class BackendProtocolError(ValueError):
    """The scoring backend returned a response we cannot interpret."""
