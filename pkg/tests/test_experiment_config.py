import pytest

from otdistill.errors import DistillError
from otdistill.experiment_config import (
    ExperimentConfig,
    load_config,
    parse_override,
    read_config_lines,
)


def test_defaults_describe_the_nette_toy_benchmark():
    config = ExperimentConfig()
    spec = config.gmm_spec()
    assert (spec.num_classes, spec.modes_per_class, spec.dim) == (10, 3, 8)
    assert config.sampler.ipc == 10
    assert config.run.seeds == (0, 1, 2, 3, 4)
    assert config.sampler_config().guidance_schedule == "constant"
    assert config.loss_weights().kappa2 == 0.025
    assert [s.id for s in config.teacher_specs()] == ["linear@0", "linear@1", "mlp-8@0", "mlp-16@0"]


def test_lines_round_trip():
    config = load_config(None, ["sampler.ipc=3", "run.seeds=1,4", "eval.coverage_factors=0.25,1.5"])
    again = ExperimentConfig.from_mapping(read_config_lines(config.to_lines()))
    assert again == config


def test_run_id_ignores_output_location():
    base = ExperimentConfig()
    moved = base.with_overrides({"run.output_dir": "elsewhere", "run.workers": "4"})
    changed = base.with_overrides({"run.seeds": "0..2"})
    assert moved.run_id() == base.run_id()
    assert changed.run_id() != base.run_id()
    assert len(base.run_id()) == 12


@pytest.mark.parametrize(
    "key,raw,expected",
    [
        ("ablation.otg", "no", False),
        ("ablation.lia", "TRUE", True),
        ("ablation.seeds", "0..3,7", (0, 1, 2, 3, 7)),
        ("student.lr", "1e-3", 0.001),
        ("sampler.guidance_metric", "mmd", "mmd"),
    ],
)
def test_values_are_coerced_to_field_types(key, raw, expected):
    config = load_config(None, [f"{key}={raw}"])
    section, name = key.split(".")
    assert getattr(getattr(config, section), name) == expected


@pytest.mark.parametrize(
    "override",
    [
        "nosection=1",
        "model.depth=3",
        "data.colour=red",
        "data.dim=eight",
        "ablation.otg=maybe",
        "run.seeds=1,1",
        "run.seeds=-1",
        "sampler.ipc=0",
        "data.mode_std=0",
        "sampler.lambda_mode=fixed",
        "relabel.pool=cnn@0",
        "student.logit_match=wasserstein",
    ],
)
def test_bad_settings_raise_config_error(override):
    with pytest.raises(DistillError) as exc:
        load_config(None, [override])
    assert exc.value.code == "config_error"


def test_eval_section_is_exposed_as_evaluation():
    config = load_config(None, ["eval.w_iterations=50"])
    assert config.evaluation.w_iterations == 50


def test_config_file_with_comments_and_overrides(tmp_path):
    path = tmp_path / "exp.conf"
    path.write_text("# toy run\ndata.num_classes = 3  # fewer classes\n\nsampler.ipc = 2\n")
    config = load_config(path, ["sampler.ipc=5"])
    assert config.data.num_classes == 3
    assert config.sampler.ipc == 5


def test_config_file_errors(tmp_path):
    with pytest.raises(DistillError) as exc:
        load_config(tmp_path / "missing.conf")
    assert exc.value.code == "config_error"
    bad = tmp_path / "bad.conf"
    bad.write_text("data.num_classes 3\n")
    with pytest.raises(DistillError) as exc:
        load_config(bad)
    assert exc.value.details["line"] == 1


def test_parse_override_needs_an_equals_sign():
    assert parse_override(" sampler.ipc = 4 ") == ("sampler.ipc", "4")
    with pytest.raises(DistillError):
        parse_override("sampler.ipc")
