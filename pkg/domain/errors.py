class EditLabError(Exception):
    """Base class for every failure the lab reports to its callers."""

    code = "editlab"


class DimensionError(EditLabError, ValueError):
    code = "dimension"


class NonFiniteError(EditLabError, ValueError):
    code = "non_finite"


class RangeError(EditLabError, ValueError):
    code = "range"


class SingularCovarianceError(EditLabError):
    code = "singular_covariance"


class DegenerateDirectionError(EditLabError):
    code = "degenerate_direction"


class SingularSystemError(EditLabError):
    code = "singular_system"


class VocabularyError(EditLabError, ValueError):
    code = "vocabulary"


class StaleCacheError(EditLabError):
    code = "stale_cache"


class TrainingDivergenceError(EditLabError):
    code = "training_divergence"


class CorpusGenerationError(EditLabError):
    code = "corpus_generation"


class InjectionError(EditLabError):
    code = "injection"


class ProbeSearchError(EditLabError):
    code = "probe_search"


class PositiveSearchError(EditLabError):
    code = "positive_search"


class SpanError(EditLabError):
    code = "span"


class InputError(EditLabError, ValueError):
    code = "input"


class ConfigError(EditLabError, ValueError):
    code = "config"


class CheckpointFormatError(EditLabError):
    code = "checkpoint_format"
