"""Exception hierarchy.

Every error carries a short machine-readable ``category`` and the process
exit code the command line maps it to.
"""


class AnomalyError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(AnomalyError):
    category = "config-parse-error"
    exit_code = 2


class DatasetNotFoundError(AnomalyError, FileNotFoundError):
    category = "dataset-not-found"
    exit_code = 3


class LayoutViolationError(AnomalyError):
    category = "layout-violation"
    exit_code = 3


class UnknownClassError(AnomalyError, KeyError):
    category = "unknown-class"
    exit_code = 3

    def __str__(self):
        return Exception.__str__(self)


class DecodeError(AnomalyError):
    category = "decode-error"
    exit_code = 3


class EmptyInputError(AnomalyError, ValueError):
    category = "empty-input"
    exit_code = 3


class InvalidCountError(AnomalyError, ValueError):
    category = "invalid-count"
    exit_code = 3


class ShapeError(AnomalyError, ValueError):
    category = "shape-error"


class PairingError(ShapeError):
    category = "pairing-error"


class BatchTooSmallError(AnomalyError, ValueError):
    category = "batch-too-small"


class InvalidMomentsError(AnomalyError, ValueError):
    category = "invalid-moments"


class InvalidThresholdError(AnomalyError, ValueError):
    category = "invalid-threshold"


class DegenerateLabelsError(AnomalyError, ValueError):
    category = "degenerate-labels"


class ModelNotReadyError(AnomalyError):
    category = "model-not-ready"
    exit_code = 4


class FingerprintMismatchError(ModelNotReadyError):
    category = "fingerprint-mismatch"


class StaleImpressionsError(ModelNotReadyError):
    category = "stale-impressions"


class BackboneUnavailableError(ModelNotReadyError):
    category = "backbone-unavailable"


class TrainingDivergedError(AnomalyError, RuntimeError):
    category = "training-diverged"
    exit_code = 5

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
