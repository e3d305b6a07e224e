"""Teacher ensembles, soft relabeling and label-image alignment (LIA) teacher selection.

The contraction factor alpha compares class-wise OT distances between the
real set (one-hot labels) and the distilled set, once with the ensemble's
soft labels and once with their argmax projection. Lower alpha means the soft
labels line up better with where the distilled latents actually sit.
"""

from __future__ import annotations

import itertools
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import log_softmax, softmax

from otdistill.data_gen import LabeledDataset
from otdistill.errors import InvalidInput, NoValidClasses, TooLarge, TrainingDiverged
from otdistill.models import AdamW, Classifier, forward, backward, init_classifier
from otdistill.ot_core import (
    DEFAULT_DELTA,
    MAX_EXACT_POINTS,
    CostMatrix,
    cost_matrix,
    scaled_regularization,
    sinkhorn_marginals,
)
from otdistill.streams import make_rng

logger = logging.getLogger(__name__)

ROW_TOLERANCE = 1e-9
TEACHER_BATCH_SIZE = 128
DEFAULT_POOL = "linear@0, linear@1, mlp-8@0, mlp-16@0"

_TEACHER_PATTERN = re.compile(r"^(linear|uniform|mlp-(\d+))(?:@(\d+))?$")


@dataclass(frozen=True)
class TeacherSpec:
    kind: str
    hidden: int = 0
    seed: int = 0

    @property
    def id(self) -> str:
        if self.kind == "uniform":
            return "uniform"
        name = f"mlp-{self.hidden}" if self.kind == "mlp" else self.kind
        return f"{name}@{self.seed}"

    @classmethod
    def parse(cls, text: str) -> "TeacherSpec":
        match = _TEACHER_PATTERN.match(text.strip())
        if not match:
            raise InvalidInput(
                "teacher must look like linear@SEED, mlp-H@SEED or uniform",
                details={"teacher": text},
            )
        seed = int(match.group(3) or 0)
        if match.group(2):
            return cls(kind="mlp", hidden=int(match.group(2)), seed=seed)
        return cls(kind=match.group(1), seed=seed)


def parse_pool(text: str) -> List[TeacherSpec]:
    specs = [TeacherSpec.parse(part) for part in text.split(",") if part.strip()]
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise InvalidInput("teacher pool lists the same teacher twice", details={"pool": ids})
    return specs


@dataclass(eq=False)
class Teacher:
    id: str
    kind: str
    model: Classifier
    train_seed: int

    @property
    def params(self):
        return self.model.params

    def logits(self, points) -> np.ndarray:
        return self.model.logits(points)

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "train_seed": self.train_seed, "model": self.model.to_dict()}

    @classmethod
    def from_dict(cls, payload: dict) -> "Teacher":
        return cls(
            id=payload["id"],
            kind=payload["kind"],
            model=Classifier.from_dict(payload["model"]),
            train_seed=int(payload["train_seed"]),
        )


@dataclass(frozen=True, eq=False)
class SoftLabelSet:
    labels: np.ndarray
    source_teachers: Tuple[str, ...]

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels, dtype=np.float64)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "source_teachers", tuple(self.source_teachers))
        if labels.ndim != 2:
            raise InvalidInput("soft labels must be an (N, C) matrix")
        if np.any(labels < 0) or np.any(np.abs(labels.sum(axis=1) - 1.0) > ROW_TOLERANCE):
            raise InvalidInput("soft label rows must be probability vectors")

    @property
    def num_classes(self) -> int:
        return int(self.labels.shape[1])

    def hard_projection(self) -> np.ndarray:
        hard = np.zeros_like(self.labels)
        hard[np.arange(self.labels.shape[0]), np.argmax(self.labels, axis=1)] = 1.0
        return hard


@dataclass(eq=False)
class AlphaReport:
    w_soft: float
    w_hard: float
    alpha: float
    soft_classes: List[int] = field(default_factory=list)
    hard_classes: List[int] = field(default_factory=list)
    soft_costs: List[float] = field(default_factory=list)
    hard_costs: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        soft = dict(zip(self.soft_classes, self.soft_costs))
        hard = dict(zip(self.hard_classes, self.hard_costs))
        per_class = [
            {"class": c, "soft": soft.get(c), "hard": hard.get(c)}
            for c in sorted(set(soft) | set(hard))
        ]
        return {"w_soft": self.w_soft, "w_hard": self.w_hard, "alpha": self.alpha, "per_class": per_class}


def train_teacher(
    train: LabeledDataset,
    kind: str,
    seed: int,
    epochs: int = 200,
    lr: float = 0.01,
    *,
    hidden: int = 16,
    num_classes: Optional[int] = None,
    batch_size: int = TEACHER_BATCH_SIZE,
) -> Teacher:
    """Mini-batch AdamW on softmax cross-entropy; the uniform kind stays at zero weights."""
    if len(train) == 0:
        raise InvalidInput("teacher training set is empty")
    if not lr > 0:
        raise InvalidInput("learning rate must be positive", details={"lr": lr})
    num_classes = num_classes or int(train.labels.max()) + 1
    spec = TeacherSpec(kind=kind, hidden=hidden if kind == "mlp" else 0, seed=seed)
    rng = make_rng("teacher", seed, spec.hidden)
    model = init_classifier(kind, train.dim, num_classes, rng=rng, hidden=hidden)
    if kind == "uniform":
        return Teacher(id=spec.id, kind=kind, model=model, train_seed=seed)

    targets = train.one_hot(num_classes)
    optimizer = AdamW(lr=lr)
    n = len(train)
    size = min(batch_size, n)
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n - size + 1, size):
            idx = order[start : start + size]
            logits, cache = forward(model, train.points[idx])
            loss = float(-np.mean(np.sum(targets[idx] * log_softmax(logits, axis=1), axis=1)))
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    "teacher loss became non-finite",
                    details={"teacher": spec.id, "epoch": epoch},
                )
            dlogits = (softmax(logits, axis=1) - targets[idx]) / idx.size
            optimizer.update(model.params, backward(model, cache, dlogits))
            epoch_loss += loss
        logger.debug(f"teacher {spec.id} epoch {epoch}: loss {epoch_loss:.4f}")
    if not model.is_finite():
        raise TrainingDiverged("teacher parameters became non-finite", details={"teacher": spec.id})
    accuracy = float(np.mean(np.argmax(model.logits(train.points), axis=1) == train.labels))
    logger.info(f"Trained teacher {spec.id}: train accuracy {accuracy:.3f}")
    return Teacher(id=spec.id, kind=kind, model=model, train_seed=seed)


def train_pool(
    train: LabeledDataset,
    specs: Sequence[TeacherSpec],
    *,
    epochs: int = 200,
    lr: float = 0.01,
    num_classes: Optional[int] = None,
) -> List[Teacher]:
    return [
        train_teacher(train, s.kind, s.seed, epochs, lr, hidden=s.hidden or 16, num_classes=num_classes)
        for s in specs
    ]


def soft_label(points, teachers: Sequence[Teacher]) -> SoftLabelSet:
    """Average the teachers' logits, then softmax each row."""
    if not teachers:
        raise InvalidInput("soft labeling needs at least one teacher")
    mean_logits = np.mean([t.logits(points) for t in teachers], axis=0)
    return SoftLabelSet(labels=softmax(mean_logits, axis=1), source_teachers=tuple(t.id for t in teachers))


def _classwise_costs(
    C: np.ndarray,
    H: np.ndarray,
    S: np.ndarray,
    eps: float,
    T: int,
    delta: float,
) -> Tuple[List[int], List[float]]:
    classes, costs = [], []
    for c in range(H.shape[1]):
        a = H[:, c]
        b = S[:, c]
        if a.sum() == 0 or b.sum() == 0:
            continue
        # rows/columns with zero marginal carry no mass in the scaling iterates
        rows = a > 0
        cols = b > 0
        a_c = a[rows] / a[rows].sum()
        b_c = b[cols] / b[cols].sum()
        result = sinkhorn_marginals(C[np.ix_(rows, cols)], a_c, b_c, eps, T, delta)
        classes.append(c)
        costs.append(result.distance)
    return classes, costs


def contraction_alpha(
    real_points,
    real_onehot,
    distilled_points,
    soft: Union[SoftLabelSet, np.ndarray],
    *,
    epsilon: Optional[float] = None,
    epsilon_scale: float = 0.1,
    T: int = 100,
    delta: float = DEFAULT_DELTA,
    p: float = 1.0,
    cost: Optional[CostMatrix] = None,
) -> AlphaReport:
    H = np.asarray(real_onehot, dtype=np.float64)
    S = soft.labels if isinstance(soft, SoftLabelSet) else np.asarray(soft, dtype=np.float64)
    if H.ndim != 2 or S.ndim != 2 or H.shape[1] != S.shape[1]:
        raise InvalidInput("label matrices must share the class dimension", details={"real": list(H.shape), "distilled": list(S.shape)})
    C = cost if cost is not None else cost_matrix(real_points, distilled_points, p)
    values = C.values if isinstance(C, CostMatrix) else np.asarray(C, dtype=np.float64)
    if values.shape != (H.shape[0], S.shape[0]):
        raise InvalidInput("cost matrix does not match the label matrices", details={"cost": list(values.shape)})
    eps = epsilon if epsilon is not None else scaled_regularization(values, epsilon_scale)

    hard = np.zeros_like(S)
    hard[np.arange(S.shape[0]), np.argmax(S, axis=1)] = 1.0
    soft_classes, soft_costs = _classwise_costs(values, H, S, eps, T, delta)
    hard_classes, hard_costs = _classwise_costs(values, H, hard, eps, T, delta)
    if not soft_classes or not hard_classes:
        raise NoValidClasses("no class has mass on both the real and distilled side")

    w_soft = float(np.mean(soft_costs))
    w_hard = float(np.mean(hard_costs))
    if w_hard > 0:
        alpha = w_soft / w_hard
    elif w_soft == 0:
        alpha = 1.0
    else:
        logger.warning("hard-label OT distance is zero while the soft one is not; alpha is infinite")
        alpha = float("inf")
    return AlphaReport(
        w_soft=w_soft,
        w_hard=w_hard,
        alpha=alpha,
        soft_classes=soft_classes,
        hard_classes=hard_classes,
        soft_costs=soft_costs,
        hard_costs=hard_costs,
    )


def rank_teacher_subsets(
    pool: Sequence[Teacher],
    real_points,
    real_onehot,
    distilled_points,
    *,
    epsilon_scale: float = 0.1,
    T: int = 100,
    delta: float = DEFAULT_DELTA,
    p: float = 1.0,
) -> List[Tuple[List[Teacher], AlphaReport]]:
    """Every nonempty subset of the pool with its alpha, best first."""
    if not pool:
        raise InvalidInput("teacher pool is empty")
    if len(pool) > MAX_EXACT_POINTS:
        raise TooLarge(f"exhaustive subset search is limited to {MAX_EXACT_POINTS} teachers", details={"pool": len(pool)})
    cost = cost_matrix(real_points, distilled_points, p)
    ranked = []
    for size in range(1, len(pool) + 1):
        for subset in itertools.combinations(pool, size):
            labels = soft_label(distilled_points, subset)
            report = contraction_alpha(
                real_points, real_onehot, distilled_points, labels,
                epsilon_scale=epsilon_scale, T=T, delta=delta, p=p, cost=cost,
            )
            ranked.append((list(subset), report))
    ranked.sort(key=lambda item: (item[1].alpha, len(item[0]), tuple(sorted(t.id for t in item[0]))))
    return ranked


def select_teachers(
    ipc: int,
    pool: Sequence[Teacher],
    real_points,
    real_onehot,
    distilled_points,
    **alpha_settings,
) -> List[Teacher]:
    if ipc < 1:
        raise InvalidInput("IPC must be >= 1", details={"ipc": ipc})
    subset, report = rank_teacher_subsets(pool, real_points, real_onehot, distilled_points, **alpha_settings)[0]
    logger.info(f"IPC {ipc}: selected teachers {[t.id for t in subset]} with alpha {report.alpha:.4f}")
    return subset


def save_teachers(teachers: Sequence[Teacher], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([t.to_dict() for t in teachers]))
    return path


def load_teachers(path: Union[str, Path]) -> List[Teacher]:
    return [Teacher.from_dict(entry) for entry in json.loads(Path(path).read_text())]


def write_soft_labels(labels: SoftLabelSet, path: Union[str, Path]) -> Path:
    """CSV of probability columns p_0..p_{C-1}; teacher ids go to a sidecar JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(labels.labels, columns=[f"p_{c}" for c in range(labels.num_classes)])
    frame.to_csv(path, index=False, float_format="%.17g")
    path.with_suffix(".json").write_text(json.dumps({"source_teachers": list(labels.source_teachers)}))
    return path


def read_soft_labels(path: Union[str, Path]) -> SoftLabelSet:
    path = Path(path)
    frame = pd.read_csv(path, float_precision="round_trip")
    columns = sorted((c for c in frame.columns if c.startswith("p_")), key=lambda name: int(name[2:]))
    if not columns:
        raise InvalidInput("soft label CSV has no p_ columns", details={"path": str(path)})
    sidecar = path.with_suffix(".json")
    sources = json.loads(sidecar.read_text())["source_teachers"] if sidecar.exists() else []
    return SoftLabelSet(labels=frame[columns].to_numpy(dtype=np.float64), source_teachers=tuple(sources))


def write_alpha_report(report: AlphaReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2))
    return path
