"""Synthetic class-conditional Gaussian mixtures standing in for encoded image latents."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import pandas as pd

from otdistill.errors import InvalidInput, InvalidSpec

logger = logging.getLogger(__name__)

SPLITS = ("train", "test", "distilled")
TEST_FRACTION = 0.25
SEPARATION_FACTOR = 4.0


@dataclass(frozen=True, eq=False)
class GmmSpec:
    num_classes: int
    modes_per_class: int
    dim: int
    mode_means: np.ndarray  # (C, modes, d)
    mode_weights: np.ndarray  # (C, modes)
    mode_std: float
    samples_per_class: int

    def __post_init__(self) -> None:
        means = np.asarray(self.mode_means, dtype=np.float64)
        weights = np.asarray(self.mode_weights, dtype=np.float64)
        object.__setattr__(self, "mode_means", means)
        object.__setattr__(self, "mode_weights", weights)
        if self.num_classes < 2:
            raise InvalidSpec("num_classes must be >= 2", details={"num_classes": self.num_classes})
        if self.modes_per_class < 1:
            raise InvalidSpec("modes_per_class must be >= 1")
        if self.dim < 2:
            raise InvalidSpec("dim must be >= 2", details={"dim": self.dim})
        if not self.mode_std > 0:
            raise InvalidSpec("mode_std must be positive", details={"mode_std": self.mode_std})
        if self.samples_per_class < 1:
            raise InvalidSpec("samples_per_class must be >= 1")
        expected = (self.num_classes, self.modes_per_class, self.dim)
        if means.shape != expected:
            raise InvalidSpec("mode_means has the wrong shape", details={"shape": list(means.shape), "expected": list(expected)})
        if weights.shape != expected[:2]:
            raise InvalidSpec("mode_weights has the wrong shape", details={"shape": list(weights.shape)})
        if np.any(weights < 0) or not np.allclose(weights.sum(axis=1), 1.0, atol=1e-9):
            raise InvalidSpec("mode_weights must be probability vectors per class")
        min_gap = SEPARATION_FACTOR * self.mode_std
        for c in range(self.num_classes):
            for i in range(self.modes_per_class):
                for j in range(i + 1, self.modes_per_class):
                    gap = float(np.linalg.norm(means[c, i] - means[c, j]))
                    if gap < min_gap:
                        raise InvalidSpec(
                            "mode means within a class must be separated by 4 * mode_std",
                            details={"class": c, "modes": [i, j], "gap": gap, "required": min_gap},
                        )

    @property
    def test_per_class(self) -> int:
        return max(1, int(round(TEST_FRACTION * self.samples_per_class)))

    def mixture_covariance_trace(self, c: int) -> float:
        """Trace of the covariance of class c's mixture (within-mode plus between-mode spread)."""
        means = self.mode_means[c]
        weights = self.mode_weights[c]
        centre = weights @ means
        between = float(weights @ np.sum((means - centre) ** 2, axis=1))
        return self.dim * self.mode_std**2 + between


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray
    split_tag: str

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)
        if points.ndim != 2:
            raise InvalidInput("points must be an (N, d) array", details={"shape": list(points.shape)})
        if labels.shape != (points.shape[0],):
            raise InvalidInput("labels must have one entry per point")
        if np.any(labels < 0):
            raise InvalidInput("labels must be nonnegative class indices")
        if self.split_tag not in SPLITS:
            raise InvalidInput("unknown split tag", details={"split_tag": self.split_tag})

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    def class_points(self, c: int) -> np.ndarray:
        return self.points[self.labels == c]

    def one_hot(self, num_classes: int) -> np.ndarray:
        out = np.zeros((len(self), num_classes))
        out[np.arange(len(self)), self.labels] = 1.0
        return out


def grid_mode_means(
    num_classes: int,
    modes_per_class: int,
    dim: int,
    spacing: float,
    seed: int,
) -> np.ndarray:
    """Distinct mode means drawn from the lattice spacing * {-1, 0, 1}^dim."""
    total = num_classes * modes_per_class
    if 3**dim < total:
        raise InvalidSpec("grid too small for the requested number of modes", details={"dim": dim, "modes": total})
    rng = np.random.default_rng(seed)
    chosen: list = []
    seen = set()
    while len(chosen) < total:
        cell = tuple(int(x) for x in rng.integers(-1, 2, size=dim))
        if cell in seen:
            continue
        seen.add(cell)
        chosen.append(cell)
    means = spacing * np.asarray(chosen, dtype=np.float64)
    return means.reshape(num_classes, modes_per_class, dim)


def make_spec(
    num_classes: int = 10,
    modes_per_class: int = 3,
    dim: int = 8,
    mode_std: float = 0.7,
    samples_per_class: int = 500,
    grid_spacing: float = 3.0,
    grid_seed: int = 0,
) -> GmmSpec:
    means = grid_mode_means(num_classes, modes_per_class, dim, grid_spacing, grid_seed)
    weights = np.full((num_classes, modes_per_class), 1.0 / modes_per_class)
    return GmmSpec(
        num_classes=num_classes,
        modes_per_class=modes_per_class,
        dim=dim,
        mode_means=means,
        mode_weights=weights,
        mode_std=mode_std,
        samples_per_class=samples_per_class,
    )


def nette_toy_spec(grid_seed: int = 0) -> GmmSpec:
    """Default benchmark: 10 classes, 3 modes each, 8 dimensions."""
    return make_spec(grid_seed=grid_seed)


def _draw_class(spec: GmmSpec, c: int, count: int, rng: np.random.Generator) -> np.ndarray:
    modes = rng.choice(spec.modes_per_class, size=count, p=spec.mode_weights[c])
    noise = rng.standard_normal((count, spec.dim))
    return spec.mode_means[c][modes] + spec.mode_std * noise


def make_gmm_dataset(spec: GmmSpec, seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    train_points, train_labels, test_points, test_labels = [], [], [], []
    for c in range(spec.num_classes):
        train_points.append(_draw_class(spec, c, spec.samples_per_class, train_rng))
        train_labels.append(np.full(spec.samples_per_class, c))
        test_points.append(_draw_class(spec, c, spec.test_per_class, test_rng))
        test_labels.append(np.full(spec.test_per_class, c))
    train = LabeledDataset(np.vstack(train_points), np.concatenate(train_labels), "train")
    test = LabeledDataset(np.vstack(test_points), np.concatenate(test_labels), "test")
    logger.info(f"Generated {len(train)} train / {len(test)} test points over {spec.num_classes} classes (seed {seed})")
    return train, test


def encode(points) -> np.ndarray:
    return np.array(points, dtype=np.float64, copy=True)


def decode(latents) -> np.ndarray:
    return np.array(latents, dtype=np.float64, copy=True)


def dataset_to_frame(dataset: LabeledDataset) -> pd.DataFrame:
    frame = pd.DataFrame(dataset.points, columns=[f"x_{i}" for i in range(dataset.dim)])
    frame["label"] = dataset.labels
    frame["split"] = dataset.split_tag
    return frame


def write_dataset_csv(dataset: LabeledDataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset_to_frame(dataset).to_csv(path, index=False, float_format="%.17g")
    return path


def read_dataset_csv(path: Union[str, Path]) -> LabeledDataset:
    frame = pd.read_csv(path, float_precision="round_trip")
    coords = [col for col in frame.columns if col.startswith("x_")]
    if not coords or "label" not in frame.columns or "split" not in frame.columns:
        raise InvalidInput("dataset CSV needs x_0..x_{d-1}, label and split columns", details={"path": str(path)})
    coords.sort(key=lambda name: int(name[2:]))
    splits = frame["split"].unique()
    if len(splits) != 1:
        raise InvalidInput("dataset CSV mixes several splits", details={"splits": [str(s) for s in splits]})
    return LabeledDataset(
        points=frame[coords].to_numpy(dtype=np.float64),
        labels=frame["label"].to_numpy(dtype=np.int64),
        split_tag=str(splits[0]),
    )
