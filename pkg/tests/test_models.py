import numpy as np
import pytest
from scipy.special import log_softmax, softmax

from otdistill.errors import DistillError
from otdistill.models import (
    AdamW,
    Classifier,
    backward,
    ema_update,
    forward,
    init_classifier,
    load_classifier,
    save_classifier,
    warmup_cosine,
)


def cross_entropy(model, X, Y):
    return float(-np.mean(np.sum(Y * log_softmax(model.logits(X), axis=1), axis=1)))


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_backward_matches_finite_differences(kind):
    rng = np.random.default_rng(0)
    model = init_classifier(kind, 3, 4, rng=rng, hidden=5)
    X = rng.normal(size=(6, 3))
    Y = np.eye(4)[rng.integers(0, 4, size=6)]
    logits, cache = forward(model, X)
    grads = backward(model, cache, (softmax(logits, axis=1) - Y) / X.shape[0])
    h = 1e-6
    for name, value in model.params.items():
        numeric = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            original = value[idx]
            value[idx] = original + h
            up = cross_entropy(model, X, Y)
            value[idx] = original - h
            down = cross_entropy(model, X, Y)
            value[idx] = original
            numeric[idx] = (up - down) / (2 * h)
        assert np.allclose(grads[name], numeric, rtol=1e-4, atol=1e-8), name


def test_uniform_classifier_outputs_constant_logits():
    model = init_classifier("uniform", 2, 3, rng=np.random.default_rng(0))
    assert np.array_equal(model.logits(np.random.default_rng(1).normal(size=(4, 2))), np.zeros((4, 3)))


def test_init_is_seeded():
    a = init_classifier("mlp", 4, 3, rng=np.random.default_rng(7), hidden=6)
    b = init_classifier("mlp", 4, 3, rng=np.random.default_rng(7), hidden=6)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])


@pytest.mark.parametrize("kind,dim,classes,hidden", [("cnn", 2, 2, 4), ("linear", 2, 1, 4), ("mlp", 2, 2, 0)])
def test_init_rejects_bad_shapes(kind, dim, classes, hidden):
    with pytest.raises(DistillError) as exc:
        init_classifier(kind, dim, classes, rng=np.random.default_rng(0), hidden=hidden)
    assert exc.value.code == "invalid_input"


def test_forward_rejects_wrong_dimension():
    model = init_classifier("linear", 3, 2, rng=np.random.default_rng(0))
    with pytest.raises(DistillError):
        forward(model, np.zeros((2, 4)))


def test_adamw_first_step_moves_by_the_learning_rate():
    params = {"w": np.array([1.0, -1.0])}
    opt = AdamW(lr=0.1, weight_decay=0.0)
    opt.update(params, {"w": np.array([0.5, -2.0])})
    assert np.allclose(params["w"], [0.9, -0.9], atol=1e-6)
    assert opt.step == 1


def test_adamw_weight_decay_shrinks_with_zero_gradient():
    params = {"w": np.array([2.0])}
    AdamW(lr=0.1, weight_decay=0.5).update(params, {"w": np.array([0.0])})
    assert params["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_warmup_cosine_shape():
    total = 100
    rates = [warmup_cosine(s, total, 1.0) for s in range(total)]
    assert rates[0] == pytest.approx(0.2)
    assert max(rates) == pytest.approx(1.0)
    assert rates[-1] < 0.01
    assert all(a >= b for a, b in zip(rates[5:], rates[6:]))


def test_ema_update_blends_parameters():
    rng = np.random.default_rng(0)
    model = init_classifier("linear", 2, 2, rng=rng)
    ema = model.copy()
    model.params["W"] += 1.0
    ema_update(ema, model, 0.75)
    assert np.allclose(ema.params["W"], model.params["W"] - 0.75)


def test_save_and_load_preserve_parameters(tmp_path):
    model = init_classifier("mlp", 3, 2, rng=np.random.default_rng(3), hidden=4)
    loaded = load_classifier(save_classifier(model, tmp_path / "m.json"))
    assert loaded.kind == "mlp" and loaded.hidden == 4
    for name, value in model.params.items():
        assert np.array_equal(loaded.params[name], value)


def test_from_dict_rejects_malformed_payload():
    with pytest.raises(DistillError) as exc:
        Classifier.from_dict({"kind": "linear"})
    assert exc.value.code == "invalid_input"
