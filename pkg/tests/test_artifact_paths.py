import pytest

from otdistill.artifact_paths import resolve_in_run


@pytest.mark.parametrize(
    "value,expected",
    [
        (".", "."),
        ("seed_0/alpha.json", "seed_0/alpha.json"),
        ("  report.csv ", "report.csv"),
        ("seed_0/../report.csv", "report.csv"),
    ],
)
def test_resolve_in_run_valid(tmp_path, value, expected):
    resolved = resolve_in_run(tmp_path, value)
    assert resolved.relative == expected
    root = tmp_path.resolve()
    assert resolved.absolute == (root if expected == "." else root / expected)


@pytest.mark.parametrize("value", ["../etc/passwd", "/etc/passwd", "", "   ", "seed_0/../../x"])
def test_resolve_in_run_rejects_escape(tmp_path, value):
    with pytest.raises(ValueError):
        resolve_in_run(tmp_path / "run", value)


def test_resolve_in_run_rejects_symlinks_leaving_the_run(tmp_path):
    run_dir = tmp_path / "run"
    outside = tmp_path / "outside"
    run_dir.mkdir()
    outside.mkdir()
    (run_dir / "link").symlink_to(outside, target_is_directory=True)
    with pytest.raises(ValueError):
        resolve_in_run(run_dir, "link/secret.csv")


def test_resolve_in_run_rejects_a_sibling_sharing_the_run_prefix(tmp_path):
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    (tmp_path / "run2").mkdir()
    with pytest.raises(ValueError):
        resolve_in_run(run_dir, "../run2/report.csv")
