from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Optional

from otdistill.errors import DistillError


@dataclass(frozen=True)
class SinkhornSettings:
    epsilon: float
    iterations: int
    delta: float
    p: float

    @classmethod
    def from_payload(
        cls,
        payload: Optional[Dict[str, Any]],
        *,
        default_epsilon: float,
        default_iterations: int,
        default_delta: float = 1e-9,
        default_p: float = 1.0,
    ) -> "SinkhornSettings":
        if payload is None:
            return cls(
                epsilon=default_epsilon,
                iterations=default_iterations,
                delta=default_delta,
                p=default_p,
            )
        if not isinstance(payload, dict):
            raise DistillError(
                "invalid_settings",
                "settings must be an object",
                details={"received_type": type(payload).__name__},
            )

        epsilon = payload.get("epsilon", default_epsilon)
        iterations = payload.get("iterations", default_iterations)
        delta = payload.get("delta", default_delta)
        p = payload.get("p", default_p)

        try:
            epsilon = float(epsilon)
        except (TypeError, ValueError):
            raise DistillError("invalid_settings", "epsilon must be a number")
        if not epsilon > 0:
            raise DistillError("invalid_settings", "epsilon must be > 0")

        if isinstance(iterations, bool):
            raise DistillError("invalid_settings", "iterations must be an integer")
        try:
            iterations = int(iterations)
        except (TypeError, ValueError):
            raise DistillError("invalid_settings", "iterations must be an integer")
        if iterations < 1:
            raise DistillError("invalid_settings", "iterations must be >= 1")

        try:
            delta = float(delta)
        except (TypeError, ValueError):
            raise DistillError("invalid_settings", "delta must be a number")
        if not delta > 0:
            raise DistillError("invalid_settings", "delta must be > 0")

        try:
            p = float(p)
        except (TypeError, ValueError):
            raise DistillError("invalid_settings", "p must be a number")
        if p < 1:
            raise DistillError("invalid_settings", "p must be >= 1")

        return cls(epsilon=epsilon, iterations=iterations, delta=delta, p=p)
