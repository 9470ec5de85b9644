"""Exception types shared across the package."""


class PromptCDError(Exception):
    """Base class for all package errors."""


class ShapeError(PromptCDError, ValueError):
    """Tensor dimensions incompatible with the requested operation."""


class UsageError(PromptCDError, RuntimeError):
    """API misuse: backward on a non-scalar, reusing a consumed tape, etc."""


class NumericsError(PromptCDError, FloatingPointError):
    """NaN/Inf produced by a forward op (raised only in debug mode)."""


class ConfigError(PromptCDError, ValueError):
    """Invalid run configuration. Maps to CLI exit code 2."""


class VocabularyError(PromptCDError, KeyError):
    """Prompt token not present in the vocabulary. Maps to CLI exit code 4."""

    def __str__(self):  # KeyError quotes its arg; keep the plain message
        return self.args[0] if self.args else ""


class TemporalPairError(PromptCDError, ValueError):
    """The two temporal feature pyramids disagree in shape."""


class DecoderError(PromptCDError, ValueError):
    """Decoder input is incomplete (e.g. a missing pyramid scale)."""


class GenerationError(PromptCDError, ValueError):
    """Invalid synthetic scene specification (e.g. overlapping objects)."""


class DatasetError(PromptCDError, ValueError):
    """Missing or malformed dataset on disk. Maps to CLI exit code 3."""


class CheckpointError(PromptCDError, ValueError):
    """Checkpoint file malformed or incompatible with the model."""
