"""Student training on the distilled set with kappa1*CE + kappa2*MSE + beta2*logit-matching.

The logit-matching term defaults to the batch-wise Sinkhorn distance between
soft-label rows and student probability rows. Its gradient holds the plan
fixed and flows through the cost, then through the softmax Jacobian.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.special import log_softmax, softmax, xlogy

from otdistill import kernels
from otdistill.data_gen import LabeledDataset
from otdistill.errors import InvalidInput, TrainingDiverged
from otdistill.models import AdamW, Classifier, backward, ema_update, forward, init_classifier, warmup_cosine
from otdistill.ot_core import TransportPlan, cost_matrix, fixed_plan_gradients, sinkhorn_uniform
from otdistill.streams import make_rng, stream_id

logger = logging.getLogger(__name__)

LOGIT_MATCH_MODES = ("ot", "kl", "mmd")
MSE_OPERANDS = ("probabilities", "logits")


@dataclass(frozen=True)
class LossWeights:
    kappa1: float = 1.0
    kappa2: float = 0.025
    beta2: float = 0.1
    lambda2: float = 0.1
    sinkhorn_iters: int = 50
    p: float = 1.0
    logit_match: str = "ot"
    mse_on: str = "probabilities"
    mmd_bandwidth: float = 0.0

    def __post_init__(self) -> None:
        if min(self.kappa1, self.kappa2, self.beta2) < 0:
            raise InvalidInput("loss weights must be >= 0")
        if not self.lambda2 > 0:
            raise InvalidInput("lambda2 must be > 0", details={"lambda2": self.lambda2})
        if self.logit_match not in LOGIT_MATCH_MODES:
            raise InvalidInput("unknown logit matching mode", details={"logit_match": self.logit_match})
        if self.mse_on not in MSE_OPERANDS:
            raise InvalidInput("unknown MSE operand", details={"mse_on": self.mse_on})


@dataclass(frozen=True)
class BatchLoss:
    ce: float
    mse: float
    sd: float
    total: float


@dataclass(eq=False)
class StudentModel:
    model: Classifier
    optimizer: AdamW
    ema: Optional[Classifier] = None
    epoch_losses: List[float] = field(default_factory=list)
    stream: str = ""

    @property
    def kind(self) -> str:
        return self.model.kind

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return self.model.params


def _softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    return probs * (grad_probs - np.sum(grad_probs * probs, axis=1, keepdims=True))


def _as_batch(rows, name: str) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise InvalidInput(f"{name} must be a nonempty (b, C) matrix", details={"shape": list(arr.shape)})
    return arr


def batch_ot_loss(
    t,
    s,
    lambda2: float,
    T: int,
    p: float = 1.0,
    *,
    targets_are_probabilities: bool = False,
    plan: Optional[TransportPlan] = None,
) -> Tuple[float, TransportPlan]:
    """Sinkhorn distance between softmax(t) rows and softmax(s) rows under uniform marginals.

    Pass targets_are_probabilities=True when t already holds soft-label rows.
    A supplied plan is used as-is instead of solving.
    """
    t = _as_batch(t, "t")
    s = _as_batch(s, "s")
    if t.shape != s.shape:
        raise InvalidInput("t and s must have the same shape", details={"t": list(t.shape), "s": list(s.shape)})
    if not lambda2 > 0:
        raise InvalidInput("lambda2 must be > 0", details={"lambda2": lambda2})
    target_probs = t if targets_are_probabilities else softmax(t, axis=1)
    D = cost_matrix(target_probs, softmax(s, axis=1), p)
    if plan is None:
        plan = sinkhorn_uniform(D, lambda2, T).plan
    return float(np.sum(plan.coupling * D.values)), plan


def _logit_match(
    soft: np.ndarray,
    probs: np.ndarray,
    logits: np.ndarray,
    weights: LossWeights,
    plan: Optional[TransportPlan],
) -> Tuple[float, np.ndarray, Optional[TransportPlan]]:
    b = logits.shape[0]
    if weights.logit_match == "kl":
        value = float(np.mean(np.sum(xlogy(soft, soft) - soft * log_softmax(logits, axis=1), axis=1)))
        return value, (probs * soft.sum(axis=1, keepdims=True) - soft) / b, None
    if weights.logit_match == "mmd":
        bw = weights.mmd_bandwidth if weights.mmd_bandwidth > 0 else kernels.median_bandwidth(probs, soft)
        value = kernels.mmd2(probs, soft, bw)
        return value, _softmax_backward(probs, kernels.mmd2_grad_x(probs, soft, bw)), None
    value, plan = batch_ot_loss(
        soft, logits, weights.lambda2, weights.sinkhorn_iters, weights.p,
        targets_are_probabilities=True, plan=plan,
    )
    grad_probs = fixed_plan_gradients(plan.coupling.T, probs, soft, weights.p)
    return value, _softmax_backward(probs, grad_probs), plan


def total_loss_and_grads(
    points,
    y_onehot,
    soft,
    model: Classifier,
    weights: LossWeights = LossWeights(),
    *,
    plan: Optional[TransportPlan] = None,
) -> Tuple[BatchLoss, Dict[str, np.ndarray], Optional[TransportPlan]]:
    """Loss components and parameter gradients for one batch; the OT plan is returned for reuse."""
    y = _as_batch(y_onehot, "y_onehot")
    soft = _as_batch(soft, "soft")
    logits, cache = forward(model, points)
    if logits.shape != y.shape or soft.shape != y.shape:
        raise InvalidInput(
            "batch shapes are inconsistent",
            details={"logits": list(logits.shape), "y": list(y.shape), "soft": list(soft.shape)},
        )
    b, C = logits.shape
    probs = softmax(logits, axis=1)

    ce = float(-np.mean(np.sum(y * log_softmax(logits, axis=1), axis=1)))
    dlogits = weights.kappa1 * (probs - y) / b

    if weights.mse_on == "logits":
        residual = logits - soft
        mse = float(np.mean(residual**2))
        dlogits = dlogits + weights.kappa2 * 2.0 * residual / (b * C)
    else:
        residual = probs - soft
        mse = float(np.mean(residual**2))
        dlogits = dlogits + weights.kappa2 * _softmax_backward(probs, 2.0 * residual / (b * C))

    sd = 0.0
    if weights.beta2 > 0:
        sd, dmatch, plan = _logit_match(soft, probs, logits, weights, plan)
        dlogits = dlogits + weights.beta2 * dmatch

    total = weights.kappa1 * ce + weights.kappa2 * mse + weights.beta2 * sd
    if not np.isfinite(total):
        raise TrainingDiverged("student loss became non-finite", details={"ce": ce, "mse": mse, "sd": sd})
    return BatchLoss(ce=ce, mse=mse, sd=sd, total=float(total)), backward(model, cache, dlogits), plan


def train_student(
    points,
    y_onehot,
    soft,
    *,
    seed: int,
    kind: str = "mlp",
    hidden: int = 32,
    epochs: int = 300,
    batch_size: int = 50,
    lr: float = 0.01,
    weight_decay: float = 1e-4,
    ema_rate: float = 0.0,
    weights: LossWeights = LossWeights(),
) -> StudentModel:
    points = np.asarray(points, dtype=np.float64)
    y = np.asarray(y_onehot, dtype=np.float64)
    soft = soft.labels if hasattr(soft, "labels") else np.asarray(soft, dtype=np.float64)
    n = points.shape[0]
    if batch_size < 1 or n < batch_size:
        raise InvalidInput("distilled set must hold at least one full batch", details={"n": n, "batch_size": batch_size})
    if not 0.0 <= ema_rate < 1.0:
        raise InvalidInput("ema_rate must lie in [0, 1)", details={"ema_rate": ema_rate})

    rng = make_rng("student", seed)
    model = init_classifier(kind, points.shape[1], y.shape[1], rng=rng, hidden=hidden)
    optimizer = AdamW(lr=lr, weight_decay=weight_decay)
    ema = model.copy() if ema_rate > 0 else None
    student = StudentModel(model=model, optimizer=optimizer, ema=ema, stream=stream_id("student", seed))

    batches_per_epoch = n // batch_size
    total_steps = epochs * batches_per_epoch
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        running = 0.0
        for k in range(batches_per_epoch):
            idx = order[k * batch_size : (k + 1) * batch_size]
            loss, grads, _ = total_loss_and_grads(points[idx], y[idx], soft[idx], model, weights)
            optimizer.update(model.params, grads, lr=warmup_cosine(step, total_steps, lr))
            if not model.is_finite():
                raise TrainingDiverged("student parameters became non-finite", details={"epoch": epoch, "step": step})
            if ema is not None:
                ema_update(ema, model, ema_rate)
            running += loss.total
            step += 1
        student.epoch_losses.append(running / batches_per_epoch)
        if epoch == 0 or (epoch + 1) % 50 == 0 or epoch + 1 == epochs:
            logger.info(f"student epoch {epoch + 1}/{epochs}: mean loss {student.epoch_losses[-1]:.5f}")
    return student


def evaluate(model: Union[Classifier, StudentModel], test: LabeledDataset) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    if len(test) == 0:
        raise InvalidInput("test set is empty")
    net = model.model if isinstance(model, StudentModel) else model
    predictions = np.argmax(net.logits(test.points), axis=1)
    return float(np.mean(predictions == test.labels))


def evaluate_ema(model: StudentModel, test: LabeledDataset) -> Optional[float]:
    if model.ema is None:
        return None
    return evaluate(model.ema, test)
