import json

from otdistill.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, main

TINY = [
    "--set", "data.num_classes=2",
    "--set", "data.modes_per_class=1",
    "--set", "data.dim=2",
    "--set", "data.samples_per_class=12",
    "--set", "sampler.ipc=2",
    "--set", "sampler.steps=4",
    "--set", "relabel.pool=linear@0",
    "--set", "relabel.epochs=3",
    "--set", "student.epochs=2",
    "--set", "student.hidden=4",
    "--set", "student.batch_size=2",
]


def last_payload(capsys) -> dict:
    return json.loads(capsys.readouterr().out)


def test_stagewise_commands_chain_through_files(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["gen-data", *TINY, "--out", str(data)]) == EXIT_OK
    assert last_payload(capsys)["train_points"] == 24

    distilled = tmp_path / "distilled.csv"
    assert main(["distill", *TINY, "--train", str(data / "train.csv"), "--out", str(distilled)]) == EXIT_OK
    assert last_payload(capsys)["points"] == 4

    soft = tmp_path / "soft.csv"
    args = ["relabel", *TINY, "--train", str(data / "train.csv"), "--distilled", str(distilled), "--out", str(soft)]
    assert main(args + ["--teachers", str(tmp_path / "pool.json"), "--alpha-out", str(tmp_path / "alpha.json")]) == EXIT_OK
    assert last_payload(capsys)["teachers"] == ["linear@0"]
    assert (tmp_path / "pool.json").exists()

    model = tmp_path / "student.json"
    assert main(["train", *TINY, "--distilled", str(distilled), "--soft", str(soft), "--out", str(model)]) == EXIT_OK
    capsys.readouterr()

    assert main(["eval", "--model", str(model), "--test", str(data / "test.csv")]) == EXIT_OK
    assert 0.0 <= last_payload(capsys)["accuracy"] <= 1.0

    args = ["coverage", "--real", str(data / "train.csv"), "--distilled", str(distilled), "--threshold", "0", "--threshold", "100"]
    assert main(args) == EXIT_OK
    assert last_payload(capsys)["coverage"]["100.0"] == 1.0


def test_bad_setting_exits_with_config_code(tmp_path, capsys):
    assert main(["gen-data", "--set", "data.dim=zero", "--out", str(tmp_path)]) == EXIT_CONFIG
    payload = last_payload(capsys)
    assert payload["success"] is False
    assert payload["error"]["code"] == "config_error"


def test_stage_error_exits_with_stage_code(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("x_0,label,split\n0,0,train\n1,0,test\n")
    args = ["coverage", "--real", str(tmp_path / "bad.csv"), "--distilled", str(tmp_path / "bad.csv"), "--threshold", "1"]
    assert main(args) == EXIT_STAGE
    assert last_payload(capsys)["error"]["code"] == "invalid_input"
