"""Pipeline orchestration: sample -> relabel -> train -> evaluate, per seed.

The synthetic dataset and the teacher pool depend only on the data and
relabel sections, so they are prepared once and shared by every seed and
ablation arm. Reports are deterministic; wall-clock timings are written to a
separate file.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import binomtest, spearmanr

from otdistill.data_gen import GmmSpec, LabeledDataset, make_gmm_dataset, write_dataset_csv
from otdistill.errors import DistillError, InvalidInput, StageFailed, TooLarge
from otdistill.experiment_config import ExperimentConfig
from otdistill.guided_sampler import sample_all
from otdistill.models import save_classifier
from otdistill.ot_core import MAX_EXACT_POINTS, cost_matrix, scaled_regularization, sinkhorn_uniform_log
from otdistill.relabeler import (
    Teacher,
    TeacherSpec,
    contraction_alpha,
    rank_teacher_subsets,
    soft_label,
    train_pool,
    write_alpha_report,
    write_soft_labels,
)
from otdistill.student import evaluate, evaluate_ema, train_student

logger = logging.getLogger(__name__)

STAGES = ("sample", "relabel", "train", "eval")
ABLATION_ARMS = {
    "full": (True, True, True),
    "no_otg": (False, True, True),
    "no_lia": (True, False, True),
    "no_otm": (True, True, False),
}


@dataclass(frozen=True)
class Flags:
    otg: bool = True
    lia: bool = True
    otm: bool = True


@dataclass(eq=False)
class PreparedData:
    spec: GmmSpec
    train: LabeledDataset
    test: LabeledDataset
    pool: List[Teacher]

    def teachers(self, ids: Sequence[str]) -> List[Teacher]:
        by_id = {t.id: t for t in self.pool}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise InvalidInput("teacher ids not in the prepared pool", details={"missing": missing})
        return [by_id[i] for i in ids]


@dataclass(eq=False)
class SeedResult:
    seed: int
    flags: Flags
    ipc: int
    alpha: float
    accuracy: float
    ema_accuracy: Optional[float]
    w_distill: List[float]
    coverage: Dict[float, float]
    teachers: List[str]
    streams: Dict[str, List[str]] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def w_distill_mean(self) -> float:
        return float(np.mean(self.w_distill))


@dataclass(eq=False)
class RunReport:
    run_id: str
    results: List[SeedResult]
    coverage_factors: Tuple[float, ...]

    @property
    def accuracies(self) -> List[float]:
        return [r.accuracy for r in self.results]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std_accuracy(self) -> Optional[float]:
        if len(self.results) < 2:
            return None
        return float(np.std(self.accuracies, ddof=1))

    @property
    def alphas(self) -> List[float]:
        return [r.alpha for r in self.results]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.results:
            row = {
                "run_id": self.run_id,
                "seed": r.seed,
                "otg": r.flags.otg,
                "lia": r.flags.lia,
                "otm": r.flags.otm,
                "ipc": r.ipc,
                "alpha": r.alpha,
                "accuracy": r.accuracy,
                "ema_accuracy": r.ema_accuracy,
                "w_distill_mean": r.w_distill_mean,
            }
            for factor in self.coverage_factors:
                row[coverage_column(factor)] = r.coverage[factor]
            rows.append(row)
        return pd.DataFrame(rows)

    def timings_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"run_id": self.run_id, "seed": r.seed, "stage": stage, "seconds": seconds}
                for r in self.results
                for stage, seconds in r.timings.items()
            ]
        )

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "seeds": [
                {
                    "seed": r.seed,
                    "flags": {"otg": r.flags.otg, "lia": r.flags.lia, "otm": r.flags.otm},
                    "ipc": r.ipc,
                    "alpha": r.alpha,
                    "accuracy": r.accuracy,
                    "ema_accuracy": r.ema_accuracy,
                    "w_distill": r.w_distill,
                    "coverage": {coverage_column(k): v for k, v in r.coverage.items()},
                    "teachers": r.teachers,
                    "streams": r.streams,
                }
                for r in self.results
            ],
        }


def coverage_column(factor: float) -> str:
    return f"coverage@{factor:g}std"


def coverage(real, distilled, threshold: float, p: float = 1.0) -> float:
    """Fraction of real points whose nearest distilled point lies within threshold."""
    real = np.asarray(real, dtype=np.float64)
    distilled = np.asarray(distilled, dtype=np.float64)
    if real.ndim != 2 or distilled.ndim != 2 or len(real) == 0 or len(distilled) == 0:
        raise InvalidInput("coverage needs two nonempty point sets")
    if threshold < 0:
        raise InvalidInput("coverage threshold must be >= 0", details={"threshold": threshold})
    nearest = cost_matrix(real, distilled, p).values.min(axis=1)
    return float(np.mean(nearest <= threshold))


def class_distances(real: LabeledDataset, distilled: LabeledDataset, num_classes: int, *, scale: float, T: int, p: float) -> List[float]:
    distances = []
    for c in range(num_classes):
        D = cost_matrix(distilled.class_points(c), real.class_points(c), p)
        distances.append(sinkhorn_uniform_log(D, scaled_regularization(D, scale), T).distance)
    return distances


def prepare(config: ExperimentConfig, extra_teachers: Sequence[str] = ()) -> PreparedData:
    spec = config.gmm_spec()
    train, test = make_gmm_dataset(spec, config.data.seed)
    specs = list(config.teacher_specs())
    known = {s.id for s in specs}
    for text in extra_teachers:
        extra = TeacherSpec.parse(text)
        if extra.id not in known:
            specs.append(extra)
            known.add(extra.id)
    pool = train_pool(train, specs, epochs=config.relabel.epochs, lr=config.relabel.lr, num_classes=spec.num_classes)
    return PreparedData(spec=spec, train=train, test=test, pool=pool)


@contextmanager
def _stage(name: str, seed: int, timings: Dict[str, float]) -> Iterator[None]:
    start = time.perf_counter()
    try:
        yield
    except StageFailed:
        raise
    except (DistillError, ValueError, FloatingPointError) as e:
        logger.error(f"Stage {name} failed for seed {seed}: {e}")
        raise StageFailed(name, seed, e) from e
    finally:
        timings[name] = time.perf_counter() - start


def run_seed(
    prepared: PreparedData,
    config: ExperimentConfig,
    flags: Flags,
    output_dir: Path,
    seed: int,
    teacher_ids: Optional[Sequence[str]] = None,
) -> SeedResult:
    """One pass of the pipeline; artifacts land in output_dir/seed_<seed> as they are produced."""
    seed_dir = Path(output_dir) / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    timings: Dict[str, float] = {}
    streams: Dict[str, List[str]] = {}
    spec = prepared.spec
    train = prepared.train
    ipc = config.sampler.ipc

    with _stage("sample", seed, timings):
        weights = config.guidance_weights()
        if not flags.otg:
            weights = dataclasses.replace(weights, beta1=0.0)
        distilled, streams["sample"] = sample_all(
            train, ipc, weights, config.sampler_config(), spec=spec, seed=seed
        )
        write_dataset_csv(distilled, seed_dir / "distilled.csv")

    with _stage("relabel", seed, timings):
        real_onehot = train.one_hot(spec.num_classes)
        settings = dict(
            epsilon_scale=config.relabel.epsilon_scale,
            T=config.relabel.iterations,
            delta=config.relabel.delta,
            p=config.relabel.p,
        )
        if teacher_ids is not None:
            teachers = prepared.teachers(teacher_ids)
            labels = soft_label(distilled.points, teachers)
            report = contraction_alpha(train.points, real_onehot, distilled.points, labels, **settings)
        elif flags.lia:
            ranked = rank_teacher_subsets(prepared.pool, train.points, real_onehot, distilled.points, **settings)
            teachers, report = ranked[0]
            labels = soft_label(distilled.points, teachers)
        else:
            teachers = list(prepared.pool)
            labels = soft_label(distilled.points, teachers)
            report = contraction_alpha(train.points, real_onehot, distilled.points, labels, **settings)
        logger.info(f"seed {seed}: teachers {[t.id for t in teachers]}, alpha {report.alpha:.4f}")
        write_soft_labels(labels, seed_dir / "soft_labels.csv")
        write_alpha_report(report, seed_dir / "alpha.json")

    with _stage("train", seed, timings):
        s = config.student
        loss_weights = config.loss_weights()
        if not flags.otm:
            loss_weights = dataclasses.replace(loss_weights, beta2=0.0)
        model = train_student(
            distilled.points,
            distilled.one_hot(spec.num_classes),
            labels,
            seed=seed,
            kind=s.kind,
            hidden=s.hidden,
            epochs=s.epochs,
            batch_size=min(s.batch_size, len(distilled)),
            lr=s.lr,
            weight_decay=s.weight_decay,
            ema_rate=s.ema_rate,
            weights=loss_weights,
        )
        streams["train"] = [model.stream]
        save_classifier(model.model, seed_dir / "student.json")

    with _stage("eval", seed, timings):
        e = config.evaluation
        accuracy = evaluate(model, prepared.test)
        ema_accuracy = evaluate_ema(model, prepared.test)
        w_distill = class_distances(train, distilled, spec.num_classes, scale=e.w_lambda_scale, T=e.w_iterations, p=e.p)
        covered = {f: coverage(train.points, distilled.points, f * spec.mode_std, e.p) for f in e.coverage_factors}

    logger.info(f"seed {seed} ({flags}): accuracy {accuracy:.4f}")
    return SeedResult(
        seed=seed,
        flags=flags,
        ipc=ipc,
        alpha=report.alpha,
        accuracy=accuracy,
        ema_accuracy=ema_accuracy,
        w_distill=w_distill,
        coverage=covered,
        teachers=[t.id for t in teachers],
        streams=streams,
        timings=timings,
    )


def write_report(report: RunReport, output_dir: Path) -> Path:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    report.to_frame().to_csv(output_dir / "report.csv", index=False, float_format="%.17g")
    report.timings_frame().to_csv(output_dir / "timings.csv", index=False)
    (output_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return output_dir / "report.csv"


def run_pipeline(
    config: ExperimentConfig,
    *,
    flags: Optional[Flags] = None,
    seeds: Optional[Sequence[int]] = None,
    prepared: Optional[PreparedData] = None,
    output_dir: Optional[Path] = None,
    teacher_ids: Optional[Sequence[str]] = None,
) -> RunReport:
    flags = flags or Flags(config.ablation.otg, config.ablation.lia, config.ablation.otm)
    seeds = list(seeds if seeds is not None else config.run.seeds)
    run_id = config.run_id()
    output_dir = Path(output_dir) if output_dir is not None else Path(config.run.output_dir) / run_id
    prepared = prepared or prepare(config, extra_teachers=teacher_ids or ())

    task = functools.partial(run_seed, prepared, config, flags, output_dir, teacher_ids=teacher_ids)
    if config.run.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=config.run.workers) as pool:
            results = list(pool.map(task, seeds))
    else:
        results = [task(seed) for seed in seeds]

    report = RunReport(run_id=run_id, results=results, coverage_factors=config.evaluation.coverage_factors)
    write_report(report, output_dir)
    return report


@dataclass(eq=False)
class AblationReport:
    arms: Dict[str, RunReport]
    summary: pd.DataFrame

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for arm, report in self.arms.items():
            frame = report.to_frame()
            frame.insert(0, "arm", arm)
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)


def sign_test(full: Sequence[float], other: Sequence[float]) -> Tuple[int, int, int, float]:
    """One-sided paired sign test that `full` beats `other`; ties are dropped."""
    diffs = np.asarray(full) - np.asarray(other)
    wins = int(np.sum(diffs > 0))
    losses = int(np.sum(diffs < 0))
    ties = int(np.sum(diffs == 0))
    if wins + losses == 0:
        return wins, losses, ties, 1.0
    return wins, losses, ties, float(binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue)


def ablate(config: ExperimentConfig, output_dir: Optional[Path] = None) -> AblationReport:
    """Full pipeline against each single-component ablation on paired seeds."""
    run_id = config.run_id()
    root = Path(output_dir) if output_dir is not None else Path(config.run.output_dir) / run_id
    prepared = prepare(config)
    seeds = list(config.ablation.seeds)
    arms: Dict[str, RunReport] = {}
    for arm, (otg, lia, otm) in ABLATION_ARMS.items():
        logger.info(f"Ablation arm {arm} over {len(seeds)} seeds")
        arms[arm] = run_pipeline(
            config, flags=Flags(otg, lia, otm), seeds=seeds, prepared=prepared, output_dir=root / arm
        )

    full = arms["full"].accuracies
    rows = []
    for arm, report in arms.items():
        row = {"arm": arm, "mean_accuracy": report.mean_accuracy, "std_accuracy": report.std_accuracy}
        if arm != "full":
            wins, losses, ties, p_value = sign_test(full, report.accuracies)
            row.update({"full_wins": wins, "full_losses": losses, "ties": ties, "sign_test_p": p_value})
        rows.append(row)
    result = AblationReport(arms=arms, summary=pd.DataFrame(rows))
    result.to_frame().to_csv(root / "ablation.csv", index=False, float_format="%.17g")
    result.summary.to_csv(root / "ablation_summary.csv", index=False, float_format="%.17g")
    return result


@dataclass(eq=False)
class AlphaSweep:
    table: pd.DataFrame
    spearman: Optional[float]


def sweep_alpha(
    config: ExperimentConfig,
    subsets: Sequence[Sequence[str]],
    output_dir: Optional[Path] = None,
) -> AlphaSweep:
    """Alpha and student accuracy per fixed teacher subset, sorted by ascending alpha."""
    if not subsets:
        raise InvalidInput("alpha sweep needs at least one teacher subset")
    if len(subsets) > MAX_EXACT_POINTS:
        raise TooLarge(f"alpha sweep is limited to {MAX_EXACT_POINTS} subsets", details={"subsets": len(subsets)})
    run_id = config.run_id()
    root = Path(output_dir) if output_dir is not None else Path(config.run.output_dir) / run_id / "alpha_sweep"
    extra = sorted({tid for subset in subsets for tid in subset})
    prepared = prepare(config, extra_teachers=extra)
    rows = []
    for index, subset in enumerate(subsets):
        ids = [TeacherSpec.parse(t).id for t in subset]
        report = run_pipeline(
            config,
            prepared=prepared,
            output_dir=root / f"subset_{index}",
            teacher_ids=ids,
        )
        rows.append(
            {
                "subset": "+".join(ids),
                "alpha": float(np.mean(report.alphas)),
                "mean_accuracy": report.mean_accuracy,
                "std_accuracy": report.std_accuracy,
            }
        )
    table = pd.DataFrame(rows).sort_values(["alpha", "subset"], kind="mergesort").reset_index(drop=True)
    rho = None
    if len(table) >= 3:
        value = float(spearmanr(-table["alpha"], table["mean_accuracy"])[0])
        rho = None if np.isnan(value) else value
    table.to_csv(root / "alpha_sweep.csv", index=False, float_format="%.17g")
    return AlphaSweep(table=table, spearman=rho)


def sweep_parameter(
    config: ExperimentConfig,
    key: str,
    values: Sequence[str],
    output_dir: Optional[Path] = None,
) -> pd.DataFrame:
    """One summary row per value of `section.key`; data and teachers are reused when unaffected."""
    if not values:
        raise InvalidInput("parameter sweep needs at least one value")
    root = Path(output_dir) if output_dir is not None else Path(config.run.output_dir) / config.run_id() / "sweep"
    cache: Dict[tuple, PreparedData] = {}
    rows = []
    for value in values:
        variant = config.with_overrides({key: str(value)})
        cache_key = (variant.data, variant.relabel)
        if cache_key not in cache:
            cache[cache_key] = prepare(variant)
        report = run_pipeline(variant, prepared=cache[cache_key], output_dir=root / variant.run_id())
        rows.append(
            {
                "key": key,
                "value": str(value),
                "run_id": report.run_id,
                "mean_accuracy": report.mean_accuracy,
                "std_accuracy": report.std_accuracy,
                "mean_alpha": float(np.mean(report.alphas)),
                "mean_w_distill": float(np.mean([r.w_distill_mean for r in report.results])),
            }
        )
    table = pd.DataFrame(rows)
    root.mkdir(parents=True, exist_ok=True)
    table.to_csv(root / "sweep.csv", index=False, float_format="%.17g")
    return table

