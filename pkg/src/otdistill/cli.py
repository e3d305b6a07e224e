"""Command-line entry point; each stage reads and writes CSV/JSON artifacts so it can be re-run alone."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from otdistill.config import ToolkitConfig
from otdistill.data_gen import make_gmm_dataset, read_dataset_csv, write_dataset_csv
from otdistill.errors import ConfigError, DistillError, error_payload
from otdistill.experiment_config import ExperimentConfig, load_config
from otdistill.guided_sampler import sample_all
from otdistill.harness import ablate, coverage, run_pipeline, sweep_alpha, sweep_parameter
from otdistill.models import load_classifier, save_classifier
from otdistill.relabeler import (
    contraction_alpha,
    load_teachers,
    rank_teacher_subsets,
    read_soft_labels,
    save_teachers,
    soft_label,
    train_pool,
    write_alpha_report,
    write_soft_labels,
)
from otdistill.student import evaluate, train_student

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, default=str))


def _config(args) -> ExperimentConfig:
    return load_config(args.config, args.set)


def cmd_gen_data(args) -> dict:
    config = _config(args)
    train, test = make_gmm_dataset(config.gmm_spec(), config.data.seed)
    out = Path(args.out)
    write_dataset_csv(train, out / "train.csv")
    write_dataset_csv(test, out / "test.csv")
    return {"train": str(out / "train.csv"), "test": str(out / "test.csv"), "train_points": len(train), "test_points": len(test)}


def cmd_distill(args) -> dict:
    config = _config(args)
    train = read_dataset_csv(args.train)
    weights = config.guidance_weights()
    if args.no_otg:
        weights = dataclasses.replace(weights, beta1=0.0)
    distilled, streams = sample_all(
        train, config.sampler.ipc, weights, config.sampler_config(), spec=config.gmm_spec(), seed=args.seed
    )
    write_dataset_csv(distilled, args.out)
    return {"distilled": args.out, "points": len(distilled), "streams": streams}


def cmd_relabel(args) -> dict:
    config = _config(args)
    train = read_dataset_csv(args.train)
    distilled = read_dataset_csv(args.distilled)
    num_classes = config.data.num_classes
    if args.teachers and Path(args.teachers).exists():
        pool = load_teachers(args.teachers)
    else:
        pool = train_pool(train, config.teacher_specs(), epochs=config.relabel.epochs, lr=config.relabel.lr, num_classes=num_classes)
        if args.teachers:
            save_teachers(pool, args.teachers)
    settings = dict(
        epsilon_scale=config.relabel.epsilon_scale,
        T=config.relabel.iterations,
        delta=config.relabel.delta,
        p=config.relabel.p,
    )
    real_onehot = train.one_hot(num_classes)
    if args.no_lia:
        teachers = pool
        labels = soft_label(distilled.points, teachers)
        report = contraction_alpha(train.points, real_onehot, distilled.points, labels, **settings)
    else:
        teachers, report = rank_teacher_subsets(pool, train.points, real_onehot, distilled.points, **settings)[0]
        labels = soft_label(distilled.points, teachers)
    write_soft_labels(labels, args.out)
    if args.alpha_out:
        write_alpha_report(report, args.alpha_out)
    return {"soft_labels": args.out, "teachers": [t.id for t in teachers], "alpha": report.alpha}


def cmd_train(args) -> dict:
    config = _config(args)
    distilled = read_dataset_csv(args.distilled)
    labels = read_soft_labels(args.soft)
    s = config.student
    weights = config.loss_weights()
    if args.no_otm:
        weights = dataclasses.replace(weights, beta2=0.0)
    model = train_student(
        distilled.points,
        distilled.one_hot(labels.num_classes),
        labels,
        seed=args.seed,
        kind=s.kind,
        hidden=s.hidden,
        epochs=s.epochs,
        batch_size=min(s.batch_size, len(distilled)),
        lr=s.lr,
        weight_decay=s.weight_decay,
        ema_rate=s.ema_rate,
        weights=weights,
    )
    save_classifier(model.model, args.out)
    return {"model": args.out, "final_loss": model.epoch_losses[-1] if model.epoch_losses else None}


def cmd_eval(args) -> dict:
    model = load_classifier(args.model)
    test = read_dataset_csv(args.test)
    return {"accuracy": evaluate(model, test)}


def cmd_coverage(args) -> dict:
    real = read_dataset_csv(args.real)
    distilled = read_dataset_csv(args.distilled)
    return {
        "coverage": {str(t): coverage(real.points, distilled.points, t, args.p) for t in args.threshold},
    }


def cmd_run(args) -> dict:
    config = _config(args)
    report = run_pipeline(config, output_dir=Path(args.out) if args.out else None)
    return {"run_id": report.run_id, "mean_accuracy": report.mean_accuracy, "std_accuracy": report.std_accuracy}


def cmd_ablate(args) -> dict:
    config = _config(args)
    result = ablate(config, output_dir=Path(args.out) if args.out else None)
    return {"summary": result.summary.to_dict(orient="records")}


def cmd_alpha_sweep(args) -> dict:
    config = _config(args)
    subsets = [s.split("+") for s in args.subset]
    sweep = sweep_alpha(config, subsets, output_dir=Path(args.out) if args.out else None)
    return {"table": sweep.table.to_dict(orient="records"), "spearman": sweep.spearman}


def cmd_sweep(args) -> dict:
    config = _config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    table = sweep_parameter(config, args.key, values, output_dir=Path(args.out) if args.out else None)
    return {"table": table.to_dict(orient="records")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otdistill", description="OT-guided dataset distillation on synthetic mixtures")
    parser.add_argument("--log-level", default=None, help="overrides LOG_LEVEL")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="section.key = value file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write train/test CSVs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("distill", parents=[common], help="sample the distilled latent set")
    p.add_argument("--train", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-otg", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("relabel", parents=[common], help="soft-label the distilled set")
    p.add_argument("--train", required=True)
    p.add_argument("--distilled", required=True)
    p.add_argument("--teachers", default=None, help="teacher pool JSON; trained and saved if missing")
    p.add_argument("--no-lia", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha-out", default=None)
    p.set_defaults(func=cmd_relabel)

    p = sub.add_parser("train", parents=[common], help="train a student on the distilled set")
    p.add_argument("--distilled", required=True)
    p.add_argument("--soft", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-otm", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("coverage", help="coverage of real points by distilled points")
    p.add_argument("--real", required=True)
    p.add_argument("--distilled", required=True)
    p.add_argument("--threshold", type=float, action="append", required=True)
    p.add_argument("--p", type=float, default=1.0)
    p.set_defaults(func=cmd_coverage)

    for name, func, helptext in (
        ("run", cmd_run, "full pipeline over run.seeds"),
        ("ablate", cmd_ablate, "full vs single-component ablations over ablation.seeds"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--out", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("alpha-sweep", parents=[common], help="alpha and accuracy per teacher subset")
    p.add_argument("--subset", action="append", required=True, help="teacher ids joined by '+'")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_alpha_sweep)

    p = sub.add_parser("sweep", parents=[common], help="sensitivity sweep over one setting")
    p.add_argument("--key", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    toolkit = ToolkitConfig()
    logging.basicConfig(
        level=(args.log_level or toolkit.log_level).upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )
    try:
        _emit({"success": True, **args.func(args)})
        return EXIT_OK
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        _emit(error_payload(e.code, e.message, retryable=e.retryable, details=e.details))
        return EXIT_CONFIG
    except DistillError as e:
        logger.error(f"{e.code}: {e}")
        _emit(error_payload(e.code, e.message, retryable=e.retryable, details=e.details))
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
