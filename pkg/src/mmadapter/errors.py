"""Exception hierarchy shared across the package.

Every error carries a stable ``category`` token so the CLI can emit a
single machine-parseable line on failure.
"""


class MMAdapterError(Exception):
    category = "runtime"


class ShapeError(MMAdapterError):
    category = "shape"


class RankError(ShapeError):
    category = "rank"


class DegenerateMaskError(MMAdapterError):
    category = "degenerate-mask"


class NormalizationError(MMAdapterError):
    category = "normalization"


class LabelError(MMAdapterError):
    category = "label"


class ConfigError(MMAdapterError):
    category = "config"


class DataError(MMAdapterError):
    category = "data"


class NumericError(MMAdapterError):
    category = "numeric"


class MetricError(MMAdapterError):
    category = "metric"


class StoreFormatError(MMAdapterError):
    category = "store-format"


class ChecksumMismatchError(StoreFormatError):
    category = "checksum-mismatch"


class CountMismatchError(StoreFormatError):
    category = "count-mismatch"


class NonFiniteError(StoreFormatError):
    category = "non-finite"


class NotNormalizedError(StoreFormatError):
    category = "not-normalized"
