import pytest

from otdistill.errors import DistillError
from otdistill.ot_settings import SinkhornSettings


def test_sinkhorn_settings_defaults():
    settings = SinkhornSettings.from_payload(None, default_epsilon=0.5, default_iterations=100)
    assert settings.epsilon == 0.5
    assert settings.iterations == 100
    assert settings.delta == 1e-9
    assert settings.p == 1.0


def test_sinkhorn_settings_override():
    settings = SinkhornSettings.from_payload(
        {"epsilon": "0.25", "iterations": 7, "delta": 1e-12, "p": 2},
        default_epsilon=0.5,
        default_iterations=100,
    )
    assert settings.epsilon == 0.25
    assert settings.iterations == 7
    assert settings.delta == 1e-12
    assert settings.p == 2.0


@pytest.mark.parametrize(
    "payload,expected",
    [
        ("bad", "settings must be an object"),
        ({"epsilon": 0}, "epsilon must be > 0"),
        ({"epsilon": "x"}, "epsilon must be a number"),
        ({"iterations": 0}, "iterations must be >= 1"),
        ({"iterations": True}, "iterations must be an integer"),
        ({"iterations": "x"}, "iterations must be an integer"),
        ({"delta": -1}, "delta must be > 0"),
        ({"p": 0.5}, "p must be >= 1"),
        ({"p": None}, "p must be a number"),
    ],
)
def test_sinkhorn_settings_invalid(payload, expected):
    with pytest.raises(DistillError) as exc:
        SinkhornSettings.from_payload(
            payload,  # type: ignore[arg-type]
            default_epsilon=1.0,
            default_iterations=10,
        )
    assert exc.value.code == "invalid_settings"
    assert expected in exc.value.message
