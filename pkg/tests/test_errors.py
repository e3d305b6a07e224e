import pytest

from otdistill.errors import (
    ConfigError,
    EmptyMarginal,
    InvalidInput,
    NumericalUnderflow,
    SamplingDiverged,
    StageFailed,
    error_payload,
)


def test_error_payload_shape():
    payload = error_payload("invalid_path", "bad path", retryable=False, details={"path": "../x"})
    assert payload["success"] is False
    assert payload["error"]["code"] == "invalid_path"
    assert payload["error"]["message"] == "bad path"
    assert payload["error"]["retryable"] is False
    assert payload["error"]["details"]["path"] == "../x"


def test_error_payload_omits_empty_details():
    payload = error_payload("run_not_found", "Run x not found")
    assert "details" not in payload["error"]


@pytest.mark.parametrize(
    "cls,code",
    [
        (InvalidInput, "invalid_input"),
        (NumericalUnderflow, "numerical_underflow"),
        (EmptyMarginal, "empty_marginal"),
        (SamplingDiverged, "sampling_diverged"),
        (ConfigError, "config_error"),
    ],
)
def test_subclasses_carry_fixed_codes(cls, code):
    err = cls("something broke", details={"step": 3})
    assert err.code == code
    assert str(err) == "something broke"
    assert err.details == {"step": 3}
    assert err.retryable is False


def test_stage_failed_keeps_cause_context():
    cause = SamplingDiverged("latent left the data range", details={"class": 2, "step": 17})
    err = StageFailed("sample", 4, cause)
    assert err.code == "stage_failed"
    assert err.details["stage"] == "sample"
    assert err.details["seed"] == 4
    assert err.details["cause_code"] == "sampling_diverged"
    assert err.details["cause_details"] == {"class": 2, "step": 17}


def test_stage_failed_wraps_plain_exceptions():
    err = StageFailed("train", 0, ValueError("bad shape"))
    assert "cause_code" not in err.details
    assert err.details["reason"] == "bad shape"
