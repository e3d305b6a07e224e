from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Optional


@dataclass
class DistillError(Exception):
    code: str
    message: str
    retryable: bool = False
    details: Optional[Dict[str, Any]] = None

    def __str__(self) -> str:
        return self.message


class InvalidInput(DistillError):
    def __init__(self, message: str, *, details: Optional[Dict[str, Any]] = None):
        super().__init__("invalid_input", message, details=details)


class NumericalUnderflow(DistillError):
    def __init__(self, message: str, *, details: Optional[Dict[str, Any]] = None):
        super().__init__("numerical_underflow", message, details=details)


class EmptyMarginal(DistillError):
    def __init__(self, message: str, *, details: Optional[Dict[str, Any]] = None):
        super().__init__("empty_marginal", message, details=details)


class TooLarge(DistillError):
    def __init__(self, message: str, *, details: Optional[Dict[str, Any]] = None):
        super().__init__("too_large", message, details=details)


class SizeMismatch(DistillError):
    def __init__(self, message: str, *, details: Optional[Dict[str, Any]] = None):
        super().__init__("size_mismatch", message, details=details)


class InvalidSpec(DistillError):
    def __init__(self, message: str, *, details: Optional[Dict[str, Any]] = None):
        super().__init__("invalid_spec", message, details=details)


class SamplingDiverged(DistillError):
    def __init__(self, message: str, *, details: Optional[Dict[str, Any]] = None):
        super().__init__("sampling_diverged", message, details=details)


class TrainingDiverged(DistillError):
    def __init__(self, message: str, *, details: Optional[Dict[str, Any]] = None):
        super().__init__("training_diverged", message, details=details)


class NoValidClasses(DistillError):
    def __init__(self, message: str, *, details: Optional[Dict[str, Any]] = None):
        super().__init__("no_valid_classes", message, details=details)


class ConfigError(DistillError):
    def __init__(self, message: str, *, details: Optional[Dict[str, Any]] = None):
        super().__init__("config_error", message, details=details)


class StageFailed(DistillError):
    """A pipeline stage aborted; `details` carries stage, seed and the cause."""

    def __init__(self, stage: str, seed: int, cause: Exception):
        details: Dict[str, Any] = {"stage": stage, "seed": seed, "reason": str(cause)}
        if isinstance(cause, DistillError):
            details["cause_code"] = cause.code
            if cause.details:
                details["cause_details"] = cause.details
        super().__init__(
            "stage_failed",
            f"stage '{stage}' failed for seed {seed}: {cause}",
            retryable=False,
            details=details,
        )


def error_payload(
    code: str,
    message: str,
    *,
    retryable: bool = False,
    details: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    payload: Dict[str, Any] = {
        "success": False,
        "error": {
            "code": code,
            "message": message,
            "retryable": retryable,
        },
    }
    if details:
        payload["error"]["details"] = details
    return payload
