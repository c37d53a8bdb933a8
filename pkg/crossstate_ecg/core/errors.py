"""
Exception hierarchy
Every failure the pipeline reports carries a machine-readable code
"""
from typing import Any, Dict, Optional


class CrossStateError(Exception):
    """Base class for all pipeline errors"""

    code = "crossstate_error"

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {"error": self.code, "message": self.message, "details": self.details}


# data_io
class MissingFile(CrossStateError, FileNotFoundError):
    code = "missing_file"


class MalformedHeader(CrossStateError, ValueError):
    code = "malformed_header"


class LengthMismatch(CrossStateError, ValueError):
    code = "length_mismatch"


class InvalidRecord(CrossStateError, ValueError):
    code = "invalid_record"


class IoFailure(CrossStateError, OSError):
    code = "io_failure"


class InvalidParams(CrossStateError, ValueError):
    code = "invalid_params"


class MissingState(CrossStateError, ValueError):
    code = "missing_state"


class EmptyClass(CrossStateError, ValueError):
    code = "empty_class"


# preprocess
class InvalidCutoff(CrossStateError, ValueError):
    code = "invalid_cutoff"


class UnstableResult(CrossStateError, ArithmeticError):
    code = "unstable_result"


class DegenerateSignal(CrossStateError, ValueError):
    code = "degenerate_signal"


# autodiff
class ShapeMismatch(CrossStateError, ValueError):
    code = "shape_mismatch"


class DegenerateBatch(CrossStateError, ValueError):
    code = "degenerate_batch"


# training
class NonFiniteGradient(CrossStateError, ArithmeticError):
    code = "non_finite_gradient"


class TooFewClasses(CrossStateError, ValueError):
    code = "too_few_classes"


# adaptive_auth
class InsufficientData(CrossStateError, ValueError):
    code = "insufficient_data"


class DegenerateSeparation(CrossStateError, ArithmeticError):
    code = "degenerate_separation"


class DegenerateSpread(CrossStateError, ArithmeticError):
    code = "degenerate_spread"


class TooFewScores(CrossStateError, ValueError):
    code = "too_few_scores"


class ZeroMean(CrossStateError, ArithmeticError):
    code = "zero_mean"


class NoTemplates(CrossStateError, LookupError):
    code = "no_templates"


# evaluate
class EmptyScores(CrossStateError, ValueError):
    code = "empty_scores"


# cli / config
class ConfigError(CrossStateError, ValueError):
    code = "config_error"


class RunDirConflict(CrossStateError):
    code = "run_dir_conflict"
