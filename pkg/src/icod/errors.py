"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A config or argument is inconsistent or out of range."""


class GenerationError(RuntimeError):
    """Scene rendering produced an invalid result (e.g. object out of bounds)."""


class VocParseError(ValueError):
    """A VOC-style annotation file is malformed."""


class CheckpointError(RuntimeError):
    """Checkpoint blob or manifest is corrupt, truncated, or version-mismatched."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
