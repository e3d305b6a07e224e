"""Small softmax classifiers with hand-written backprop, AdamW and parameter EMA.

Teachers and students share this code; a classifier is a dict of float64
arrays plus its kind, so it serializes to JSON without a framework.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from otdistill.errors import InvalidInput

KINDS = ("linear", "mlp", "uniform")


@dataclass(eq=False)
class Classifier:
    kind: str
    dim: int
    num_classes: int
    params: Dict[str, np.ndarray]
    hidden: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise InvalidInput("unknown classifier kind", details={"kind": self.kind})

    def copy(self) -> "Classifier":
        return Classifier(
            kind=self.kind,
            dim=self.dim,
            num_classes=self.num_classes,
            params={k: v.copy() for k, v in self.params.items()},
            hidden=self.hidden,
        )

    def logits(self, X) -> np.ndarray:
        return forward(self, X)[0]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dim": self.dim,
            "num_classes": self.num_classes,
            "hidden": self.hidden,
            "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Classifier":
        try:
            params = {
                name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
                for name, entry in payload["params"].items()
            }
            return cls(
                kind=payload["kind"],
                dim=int(payload["dim"]),
                num_classes=int(payload["num_classes"]),
                params=params,
                hidden=int(payload.get("hidden", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidInput(f"malformed model payload: {e}") from e


def init_classifier(
    kind: str,
    dim: int,
    num_classes: int,
    *,
    rng: np.random.Generator,
    hidden: int = 16,
) -> Classifier:
    if dim < 1 or num_classes < 2:
        raise InvalidInput("classifier needs dim >= 1 and at least two classes")
    if kind == "linear":
        params = {
            "W": rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, num_classes)),
            "b": np.zeros(num_classes),
        }
        return Classifier(kind, dim, num_classes, params)
    if kind == "mlp":
        if hidden < 1:
            raise InvalidInput("mlp needs at least one hidden unit", details={"hidden": hidden})
        params = {
            "W1": rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, hidden)),
            "b1": np.zeros(hidden),
            "W2": rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, num_classes)),
            "b2": np.zeros(num_classes),
        }
        return Classifier(kind, dim, num_classes, params, hidden=hidden)
    if kind == "uniform":
        params = {"W": np.zeros((dim, num_classes)), "b": np.zeros(num_classes)}
        return Classifier(kind, dim, num_classes, params)
    raise InvalidInput("unknown classifier kind", details={"kind": kind})


def forward(model: Classifier, X) -> Tuple[np.ndarray, dict]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise InvalidInput("inputs do not match the classifier dimension", details={"shape": list(X.shape), "dim": model.dim})
    p = model.params
    if model.kind == "mlp":
        hidden = np.tanh(X @ p["W1"] + p["b1"])
        return hidden @ p["W2"] + p["b2"], {"X": X, "H": hidden}
    return X @ p["W"] + p["b"], {"X": X}


def backward(model: Classifier, cache: dict, dlogits: np.ndarray) -> Dict[str, np.ndarray]:
    """Parameter gradients given dL/dlogits for the batch in cache."""
    X = cache["X"]
    p = model.params
    if model.kind == "mlp":
        H = cache["H"]
        dH = dlogits @ p["W2"].T
        dpre = dH * (1.0 - H**2)
        return {
            "W1": X.T @ dpre,
            "b1": dpre.sum(axis=0),
            "W2": H.T @ dlogits,
            "b2": dlogits.sum(axis=0),
        }
    return {"W": X.T @ dlogits, "b": dlogits.sum(axis=0)}


@dataclass(eq=False)
class AdamW:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: Optional[float] = None) -> None:
        """One decoupled-weight-decay Adam step, in place."""
        rate = self.lr if lr is None else lr
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        for name, grad in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(grad)
                self.v[name] = np.zeros_like(grad)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad**2
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            params[name] -= rate * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * params[name])


def warmup_cosine(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.05) -> float:
    """Linear warmup over the first steps, then cosine decay to zero."""
    if total_steps <= 0:
        return base_lr
    warmup = max(1, int(math.ceil(warmup_fraction * total_steps)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def ema_update(ema: Classifier, model: Classifier, rate: float) -> None:
    for name, value in model.params.items():
        ema.params[name] = rate * ema.params[name] + (1.0 - rate) * value


def save_classifier(model: Classifier, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model.to_dict()))
    return path


def load_classifier(path: Union[str, Path]) -> Classifier:
    return Classifier.from_dict(json.loads(Path(path).read_text()))
