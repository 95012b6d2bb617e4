"""
Exception types raised across the careseg toolkit.

Validation problems subclass ValueError, file problems subclass OSError, so
callers that only know the builtin hierarchy still catch them.
"""


class CareSegError(Exception):
    """Base class for every error raised by careseg."""


# Volume file format
class BadMagic(CareSegError, ValueError):
    """File does not start with the MVOL or checkpoint magic bytes."""


class TruncatedFile(CareSegError, ValueError):
    """Header or payload is shorter than the header promises."""


class UnknownDtype(CareSegError, ValueError):
    """Header declares a dtype code outside the supported set."""


class IoFailure(CareSegError, OSError):
    """Writing an artifact failed after all retries."""


class MissingSidecar(CareSegError, FileNotFoundError):
    """A required <name>.meta.json sidecar is absent."""


# Volume semantics
class CodeOutOfRange(CareSegError, ValueError):
    """A label code does not fit the requested channel count or schema."""


class NotProbabilities(CareSegError, ValueError):
    """An operation needs a PROBS volume and got something else."""


class GeometryMismatch(CareSegError, ValueError):
    """Two volumes or tensors do not share dims/spacing."""


class UnknownCode(CareSegError, ValueError):
    """A label code is not part of the stage-3 schema."""


class SchemaMismatch(CareSegError, ValueError):
    """Channel count does not match the stage schema."""


# Network
class ShapeMismatch(CareSegError, ValueError):
    """Tensor shapes do not fit the layer or model."""


class OddSpatialDims(CareSegError, ValueError):
    """Max pooling needs even spatial dims."""


class IndivisibleDims(CareSegError, ValueError):
    """Spatial dims are not divisible by 2**(levels - 1)."""


class NoRecordedForward(CareSegError, RuntimeError):
    """Backward was requested without a recorded forward pass."""


class ArchitectureMismatch(CareSegError, ValueError):
    """Checkpoints in an ensemble disagree on their architecture."""


# Augmentation / pipeline
class DegenerateIntensities(CareSegError, ValueError):
    """10th and 90th percentile coincide, normalization is undefined."""


class InvalidSpec(CareSegError, ValueError):
    """Phantom specification violates its invariants."""


class EmptyPool(CareSegError, ValueError):
    """A training pool (with or without MVO) has no cases."""


class MissingCase(CareSegError, ValueError):
    """A ground-truth case has no matching prediction."""


class AlreadyPostprocessed(CareSegError, ValueError):
    """Predictions were post-processed but the ablation needs raw output."""


class ConfigError(CareSegError, ValueError):
    """Pipeline configuration is invalid."""


# Metrics
class TooFewCases(CareSegError, ValueError):
    """Statistic needs more cases than were supplied."""


class ZeroVariance(CareSegError, ValueError):
    """Correlation is undefined because one series is constant."""
