"""Exception types shared across the package."""


class SummaGridError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SummaGridError):
    """Operand dimensions are inconsistent with the requested operation."""


class ConfigError(SummaGridError):
    """A mesh or model configuration violates its invariants."""


class MeshMismatchError(SummaGridError):
    """Operands live on different meshes."""


class BufferOverflowError(SummaGridError):
    """An arena allocation exceeded its planned capacity."""


class CheckpointMissingError(SummaGridError):
    """Backward requested a layer input that was never checkpointed."""


class VerificationError(SummaGridError):
    """A numerical cross-check exceeded its tolerance."""
