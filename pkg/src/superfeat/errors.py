"""Exception and warning types shared across the package.

Every operational failure raises a named subclass of :class:`SuperfeatError`
so the CLI can print the error name and map it to an exit status.
"""


class SuperfeatError(Exception):
    """Base class for all package errors."""


class ConfigError(SuperfeatError):
    """Invalid, unknown, or out-of-range configuration key."""


# --- feature extraction ---

class ScaleTooSmall(SuperfeatError):
    """Resized image falls below the encoder's minimum side length."""


class NonFiniteActivation(SuperfeatError):
    """Encoder produced NaN or Inf activations."""


class AllScalesSkipped(SuperfeatError):
    """No requested scale survives the minimum-size check."""


# --- attention / features ---

class DegenerateColumn(SuperfeatError):
    """An attention column underflowed to an exact zero sum."""


class ZeroFeature(SuperfeatError):
    """A projected feature has (near-)zero norm; flagged unusable."""


class ZeroDescriptor(SuperfeatError):
    """Aggregated global descriptor has (near-)zero norm."""


class ZeroAttentionColumn(SuperfeatError):
    """Attention column with (near-)zero norm in a cosine computation."""


# --- whitening / training ---

class RankDeficient(SuperfeatError):
    """Sample covariance rank is below the requested output dimension."""


class PoolTooSmall(SuperfeatError):
    """Fewer candidate negatives than requested per tuple."""


class DivergenceDetected(SuperfeatError):
    """Training loss became non-finite."""


# --- indexing / search ---

class NoFeatures(SuperfeatError):
    """An image contributed no usable features to aggregate."""


class IndexEmpty(SuperfeatError):
    """Index build finished with zero indexed images."""


# --- evaluation ---

class NoRelevant(SuperfeatError):
    """A query has an empty relevant set."""


class KTooLarge(SuperfeatError):
    """Neighborhood size exceeds the feature set size."""


class IdOutOfRange(SuperfeatError):
    """Requested feature ID outside [0, N)."""


# --- warning categories (recorded, not raised) ---

class ScaleSkippedWarning(UserWarning):
    """A scale was skipped because the resized image was too small."""


class ZeroFeatureWarning(UserWarning):
    """A feature was flagged unusable instead of emitting NaN."""
