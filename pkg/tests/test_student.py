import numpy as np
import pytest
from scipy.special import softmax

from otdistill.data_gen import LabeledDataset, make_gmm_dataset, make_spec
from otdistill.errors import DistillError
from otdistill.models import Classifier, init_classifier
from otdistill.ot_core import exact_ot_assignment
from otdistill.streams import make_rng
from otdistill.student import (
    LossWeights,
    batch_ot_loss,
    evaluate,
    evaluate_ema,
    total_loss_and_grads,
    train_student,
)


def random_batch(seed=0, b=5, d=3, C=4):
    rng = np.random.default_rng(seed)
    points = rng.normal(size=(b, d))
    y = np.eye(C)[rng.integers(0, C, size=b)]
    soft = softmax(rng.normal(size=(b, C)), axis=1)
    model = init_classifier("mlp", d, C, rng=rng, hidden=6)
    return points, y, soft, model


def numeric_grads(model, f, h=1e-6):
    grads = {}
    for name, value in model.params.items():
        grad = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            original = value[idx]
            value[idx] = original + h
            up = f()
            value[idx] = original - h
            down = f()
            value[idx] = original
            grad[idx] = (up - down) / (2 * h)
        grads[name] = grad
    return grads


def test_single_row_loss_is_the_probability_distance():
    t = np.array([[0.2, 1.0, -0.5]])
    s = np.array([[1.0, 0.0, 0.0]])
    loss, plan = batch_ot_loss(t, s, 0.1, 10, p=1)
    assert loss == pytest.approx(np.abs(softmax(t) - softmax(s)).sum())
    assert plan.coupling.shape == (1, 1)
    assert batch_ot_loss(t, t + 3.0, 0.1, 10)[0] == pytest.approx(0.0, abs=1e-12)


def test_matching_rows_sit_near_the_entropic_floor():
    t = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    loss, _ = batch_ot_loss(t, t.copy(), 1e-3, 100)
    assert loss <= 1e-3
    probs = softmax(t, axis=1)
    assert exact_ot_assignment(probs, probs, 1) == 0.0


def test_swapped_corners_are_matched_by_the_plan():
    targets = np.eye(2)
    logits = np.array([[-20.0, 20.0], [20.0, -20.0]])
    loss, plan = batch_ot_loss(targets, logits, 1e-2, 200, targets_are_probabilities=True)
    assert loss <= 0.05
    assert plan.coupling[0, 1] > 0.49 and plan.coupling[1, 0] > 0.49


def test_batch_ot_loss_rejects_mismatched_shapes():
    with pytest.raises(DistillError) as exc:
        batch_ot_loss(np.zeros((2, 3)), np.zeros((3, 3)), 0.1, 10)
    assert exc.value.code == "invalid_input"


def test_cross_entropy_gradients_match_finite_differences():
    points, y, soft, model = random_batch(1)
    weights = LossWeights(kappa2=0.0, beta2=0.0)
    _, grads, _ = total_loss_and_grads(points, y, soft, model, weights)
    numeric = numeric_grads(model, lambda: total_loss_and_grads(points, y, soft, model, weights)[0].total)
    for name in grads:
        assert np.allclose(grads[name], numeric[name], rtol=1e-4, atol=1e-8), name


@pytest.mark.parametrize(
    "weights",
    [
        LossWeights(kappa2=1.0, beta2=1.0),
        LossWeights(kappa2=1.0, beta2=1.0, p=2.0, mse_on="logits"),
        LossWeights(beta2=1.0, logit_match="kl"),
        LossWeights(beta2=1.0, logit_match="mmd", mmd_bandwidth=0.5),
    ],
)
def test_full_loss_gradients_match_finite_differences_with_a_frozen_plan(weights):
    points, y, soft, model = random_batch(2)
    _, grads, plan = total_loss_and_grads(points, y, soft, model, weights)
    numeric = numeric_grads(
        model, lambda: total_loss_and_grads(points, y, soft, model, weights, plan=plan)[0].total
    )
    for name in grads:
        assert np.allclose(grads[name], numeric[name], rtol=1e-3, atol=1e-7), name


def test_mse_gradient_vanishes_at_the_targets():
    points, y, _, model = random_batch(3)
    soft = softmax(model.logits(points), axis=1)
    _, grads, _ = total_loss_and_grads(points, y, soft, model, LossWeights(kappa1=0.0, kappa2=1.0, beta2=0.0))
    for grad in grads.values():
        assert np.allclose(grad, 0.0, atol=1e-15)


def test_loss_is_equivariant_under_batch_permutation():
    points, y, soft, model = random_batch(4, b=6)
    perm = np.random.default_rng(0).permutation(6)
    weights = LossWeights(beta2=1.0, sinkhorn_iters=200)
    a, grads_a, _ = total_loss_and_grads(points, y, soft, model, weights)
    b, grads_b, _ = total_loss_and_grads(points[perm], y[perm], soft[perm], model, weights)
    assert b.total == pytest.approx(a.total, rel=1e-9)
    for name in grads_a:
        assert np.allclose(grads_a[name], grads_b[name], atol=1e-10)


def test_non_finite_batch_raises_training_diverged():
    points, y, soft, model = random_batch(5)
    points[0, 0] = np.nan
    with pytest.raises(DistillError) as exc:
        total_loss_and_grads(points, y, soft, model, LossWeights(beta2=0.0))
    assert exc.value.code == "training_diverged"


def test_zero_epochs_returns_the_seeded_init():
    points, y, soft, _ = random_batch(6, b=8)
    student = train_student(points, y, soft, seed=11, kind="mlp", hidden=5, epochs=0, batch_size=4)
    expected = init_classifier("mlp", 3, 4, rng=make_rng("student", 11), hidden=5)
    for name, value in expected.params.items():
        assert np.array_equal(student.params[name], value)
    assert student.epoch_losses == []
    assert student.stream == "student:11"


def test_training_is_deterministic():
    points, y, soft, _ = random_batch(7, b=12)
    kwargs = dict(seed=3, kind="linear", epochs=4, batch_size=4, ema_rate=0.9)
    a = train_student(points, y, soft, **kwargs)
    b = train_student(points, y, soft, **kwargs)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])
        assert np.array_equal(a.ema.params[name], b.ema.params[name])
    assert len(a.epoch_losses) == 4


def test_full_batch_training_lowers_the_epoch_loss():
    spec = make_spec(num_classes=3, modes_per_class=1, dim=2, mode_std=0.3, samples_per_class=10)
    train, _ = make_gmm_dataset(spec, seed=2)
    y = train.one_hot(3)
    soft = 0.8 * y + 0.2 / 3
    student = train_student(train.points, y, soft, seed=0, kind="linear", epochs=40, batch_size=len(train), lr=0.05)
    assert len(student.epoch_losses) == 40
    assert student.epoch_losses[-1] <= student.epoch_losses[0]


def test_batch_larger_than_the_set_is_rejected():
    points, y, soft, _ = random_batch(8, b=3)
    with pytest.raises(DistillError) as exc:
        train_student(points, y, soft, seed=0, batch_size=4)
    assert exc.value.code == "invalid_input"


def test_student_trained_on_real_data_generalizes():
    spec = make_spec(num_classes=4, modes_per_class=2, dim=4, mode_std=0.5, samples_per_class=100)
    train, test = make_gmm_dataset(spec, seed=0)
    y = train.one_hot(4)
    student = train_student(
        train.points, y, y, seed=0, kind="mlp", hidden=32, epochs=60, batch_size=50, lr=0.05,
        ema_rate=0.5, weights=LossWeights(beta2=0.0),
    )
    assert evaluate(student, test) >= 0.9
    assert 0.0 <= evaluate_ema(student, test) <= 1.0


def test_evaluate_exact_and_constant_models():
    test = LabeledDataset(np.array([[-1.0, 0.0], [1.0, 0.0], [-2.0, 0.0], [2.0, 0.0]]), np.array([0, 1, 0, 1]), "test")
    perfect = Classifier("linear", 2, 2, {"W": np.array([[-1.0, 1.0], [0.0, 0.0]]), "b": np.zeros(2)})
    assert evaluate(perfect, test) == 1.0
    constant = init_classifier("uniform", 2, 2, rng=np.random.default_rng(0))
    assert evaluate(constant, test) == 0.5
