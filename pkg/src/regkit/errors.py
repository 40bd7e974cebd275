"""Exception types shared across the toolkit."""


class RegkitError(Exception):
    """Base class for all toolkit errors."""


class SourceUnreachableError(RegkitError):
    """The document source cannot be enumerated at all."""


class DuplicateFileIdError(RegkitError):
    """Two records claim the same file_id."""


class ManifestFormatError(RegkitError):
    """A sync manifest file is malformed or has an unsupported version."""


class DimensionMismatchError(RegkitError):
    """Vectors of differing dimension were combined."""


class ZeroVectorError(RegkitError):
    """Cosine similarity was requested against an all-zero vector."""


class ThrottledError(RegkitError):
    """An embedding provider signalled a rate limit.

    ``retry_after`` carries the server-provided wait in seconds, when present.
    """

    def __init__(self, message: str = "provider throttled", retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class ExhaustedRetriesError(RegkitError):
    """The retry budget for a throttled call ran out."""


class TransportError(RegkitError):
    """A remote call failed at the transport level (connection, timeout, bad payload)."""


class EmptyCandidateError(RegkitError):
    """An operation requiring a non-empty candidate list got an empty one."""


class NoPositiveError(RegkitError):
    """A label vector contains no positive entry, so no target distribution exists."""


class ScorerProtocolError(RegkitError):
    """A wire scorer returned a malformed or inconsistent response."""


class DuplicateChunkIdError(RegkitError):
    """Two indexed chunks claim the same chunk_id."""


class IndexVersionError(RegkitError):
    """A persisted index has an unsupported format version."""


class CorruptIndexError(RegkitError):
    """A persisted index file is truncated or otherwise unreadable."""


class EmptyStatementsError(RegkitError):
    """A response produced zero factual statements, so faithfulness is undefined."""


class EmptyContextError(RegkitError):
    """A context-based metric was invoked with no retrieved contexts."""


class UngroundedQAError(RegkitError):
    """A QA pair's answer_source cannot be located in its source document."""


class InsufficientChunksError(RegkitError):
    """The corpus cannot supply the requested number of negative passages."""


class LeakageError(RegkitError):
    """A document appears in both the training and the evaluation sample."""


class EmptyIndexError(RegkitError):
    """A query was issued against an index with no entries."""
