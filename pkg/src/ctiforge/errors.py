"""Exception types shared across the pipeline."""


class CtiForgeError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(CtiForgeError):
    """Invalid or inconsistent pipeline configuration."""


class EmptyDocument(CtiForgeError):
    """Report contains no non-whitespace text after markup stripping."""


class EmptyText(CtiForgeError):
    """Embedding requested for empty text."""


class FixtureMiss(CtiForgeError):
    """Replay mode found no recorded response for a prompt key."""

    def __init__(self, task_tag: str, key: str):
        self.task_tag = task_tag
        self.key = key
        super().__init__(f"no recorded fixture for task={task_tag} key={key}")


class ProviderError(CtiForgeError):
    """Model provider failed after retries were exhausted."""


class DimensionMismatch(CtiForgeError):
    """Vectors of different dimensionality were combined."""


class ZeroVector(CtiForgeError):
    """Cosine similarity requested against a zero-norm vector."""


class EmptyStore(CtiForgeError):
    """Similarity query against a store with no entries."""


class UnsupportedType(CtiForgeError):
    """Operation not defined for this IOC type."""
