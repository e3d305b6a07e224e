import numpy as np
import pytest
from scipy.cluster.vq import kmeans2

from otdistill.data_gen import (
    GmmSpec,
    LabeledDataset,
    decode,
    encode,
    make_gmm_dataset,
    make_spec,
    nette_toy_spec,
    read_dataset_csv,
    write_dataset_csv,
)
from otdistill.errors import DistillError


def small_spec(**overrides) -> GmmSpec:
    params = dict(num_classes=3, modes_per_class=2, dim=3, mode_std=0.5, samples_per_class=40)
    params.update(overrides)
    return make_spec(**params)


def test_nette_toy_defaults():
    spec = nette_toy_spec()
    assert (spec.num_classes, spec.modes_per_class, spec.dim) == (10, 3, 8)
    assert spec.mode_means.shape == (10, 3, 8)
    assert spec.test_per_class == 125


def test_mode_means_are_distinct_lattice_points():
    spec = nette_toy_spec()
    flat = spec.mode_means.reshape(-1, spec.dim)
    assert len({tuple(row) for row in flat}) == flat.shape[0]
    assert set(np.unique(flat)) <= {-3.0, 0.0, 3.0}


def test_dataset_shapes_and_balance():
    spec = small_spec()
    train, test = make_gmm_dataset(spec, seed=1)
    assert len(train) == 3 * 40
    assert len(test) == 3 * spec.test_per_class
    assert train.split_tag == "train"
    assert test.split_tag == "test"
    assert np.bincount(train.labels).tolist() == [40, 40, 40]


def test_same_seed_same_dataset():
    spec = small_spec()
    a, _ = make_gmm_dataset(spec, seed=9)
    b, _ = make_gmm_dataset(spec, seed=9)
    c, _ = make_gmm_dataset(spec, seed=10)
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points)


def test_class_samples_track_the_mixture_moments():
    spec = small_spec(samples_per_class=4000)
    train, _ = make_gmm_dataset(spec, seed=0)
    for c in range(spec.num_classes):
        points = train.class_points(c)
        expected_mean = spec.mode_weights[c] @ spec.mode_means[c]
        assert np.allclose(points.mean(axis=0), expected_mean, atol=0.15)
        trace = np.trace(np.cov(points.T))
        assert trace == pytest.approx(spec.mixture_covariance_trace(c), rel=0.1)


def test_spec_rejects_overlapping_modes():
    means = np.zeros((2, 2, 2))
    means[0, 1] = [0.5, 0.0]
    means[1, 0] = [5.0, 5.0]
    means[1, 1] = [-5.0, 5.0]
    with pytest.raises(DistillError) as exc:
        GmmSpec(2, 2, 2, means, np.full((2, 2), 0.5), 0.5, 10)
    assert exc.value.code == "invalid_spec"
    assert exc.value.details["class"] == 0


@pytest.mark.parametrize(
    "overrides",
    [{"num_classes": 1}, {"dim": 1, "num_classes": 2, "modes_per_class": 1}, {"mode_std": 0.0}, {"samples_per_class": 0}],
)
def test_spec_rejects_degenerate_settings(overrides):
    with pytest.raises(DistillError) as exc:
        small_spec(**overrides)
    assert exc.value.code == "invalid_spec"


def test_encode_decode_are_identity_copies():
    points = np.arange(6.0).reshape(3, 2)
    latents = encode(points)
    assert np.array_equal(decode(latents), points)
    latents[0, 0] = 99.0
    assert points[0, 0] == 0.0


def test_csv_round_trip_is_exact(tmp_path):
    train, _ = make_gmm_dataset(small_spec(), seed=3)
    path = write_dataset_csv(train, tmp_path / "train.csv")
    loaded = read_dataset_csv(path)
    assert np.array_equal(loaded.points, train.points)
    assert np.array_equal(loaded.labels, train.labels)
    assert loaded.split_tag == "train"


def test_read_rejects_mixed_splits(tmp_path):
    path = tmp_path / "mixed.csv"
    path.write_text("x_0,x_1,label,split\n0,0,0,train\n1,1,1,test\n")
    with pytest.raises(DistillError) as exc:
        read_dataset_csv(path)
    assert exc.value.code == "invalid_input"


def test_labeled_dataset_validates_shapes():
    with pytest.raises(DistillError):
        LabeledDataset(np.zeros((3, 2)), np.zeros(2), "train")
    with pytest.raises(DistillError):
        LabeledDataset(np.zeros((3, 2)), np.zeros(3), "validation")


def test_kmeans_recovers_the_modes_of_each_class():
    spec = small_spec(samples_per_class=200)
    train, _ = make_gmm_dataset(spec, seed=4)
    for c in range(spec.num_classes):
        points = train.class_points(c)
        far = points[np.argmax(np.linalg.norm(points - points[0], axis=1))]
        centroids, _ = kmeans2(points, np.vstack([points[0], far]), minit="matrix")
        means = spec.mode_means[c]
        error = min(
            np.linalg.norm(centroids - means, axis=1).max(),
            np.linalg.norm(centroids[::-1] - means, axis=1).max(),
        )
        assert error <= 0.5
