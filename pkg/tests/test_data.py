import json

import numpy as np
import pytest

from fedward.data import (
    ClientPartition,
    LabeledImageSet,
    build_planting_set,
    class_counts,
    dirichlet_partition,
    make_noise_set,
    make_shapes_dataset,
    skew_report,
)
from fedward.errors import ConfigurationError


def _toy_set(n=400, n_classes=4, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, size=(n, 3, 8, 8)).astype(np.float32)
    labels = rng.integers(0, n_classes, size=n)
    return LabeledImageSet(images, labels, n_classes)


def test_single_client_owns_everything():
    data = _toy_set()
    part = dirichlet_partition(data, n_clients=1, alpha=0.5, seed=0)
    assert part.n_clients == 1
    assert sorted(part.client_indices[0].tolist()) == list(range(len(data)))


@pytest.mark.parametrize("alpha,n_clients,seed", [(0.3, 5, 0), (1.0, 8, 3), (10.0, 3, 9)])
def test_partition_is_exact_disjoint_cover(alpha, n_clients, seed):
    data = _toy_set()
    part = dirichlet_partition(data, n_clients, alpha, seed)
    merged = np.concatenate(part.client_indices)
    assert len(merged) == len(data)
    assert len(np.unique(merged)) == len(data)
    assert all(len(ix) >= 1 for ix in part.client_indices)


def test_per_class_counts_sum_to_dataset_counts():
    data = _toy_set()
    part = dirichlet_partition(data, n_clients=6, alpha=0.5, seed=1)
    total = np.zeros(data.n_classes, dtype=int)
    for ix in part.client_indices:
        total += class_counts(data.labels[ix], data.n_classes)
    assert np.array_equal(total, class_counts(data.labels, data.n_classes))


def test_skew_decreases_with_alpha_monte_carlo():
    # oracle: mean skew over 20 seeds, low alpha must exceed high alpha
    data = _toy_set(n=400, n_classes=4)

    def mean_skew(alpha):
        vals = []
        for seed in range(20):
            part = dirichlet_partition(data, n_clients=8, alpha=alpha, seed=seed)
            vals.append(np.mean(part.skew))
        return float(np.mean(vals))

    assert mean_skew(0.3) > mean_skew(10.0)


def test_identical_seeds_identical_partitions():
    data = _toy_set()
    a = dirichlet_partition(data, 7, 0.4, seed=42)
    b = dirichlet_partition(data, 7, 0.4, seed=42)
    for ia, ib in zip(a.client_indices, b.client_indices):
        assert np.array_equal(ia, ib)


def test_too_many_clients_is_config_error():
    data = _toy_set(n=10)
    with pytest.raises(ConfigurationError):
        dirichlet_partition(data, n_clients=11, alpha=1.0, seed=0)


def test_partition_json_roundtrip():
    data = _toy_set()
    part = dirichlet_partition(data, 4, 0.7, seed=5)
    clone = ClientPartition.from_json(part.to_json())
    assert clone.alpha == part.alpha
    for ia, ib in zip(part.client_indices, clone.client_indices):
        assert np.array_equal(ia, ib)


def test_skew_report_values():
    data = _toy_set(n_classes=4)
    part = dirichlet_partition(data, 3, 0.5, seed=2)
    rows = skew_report(part, data)
    assert len(rows) == part.n_clients

    uniform = LabeledImageSet(
        np.zeros((100, 1, 4, 4), dtype=np.float32), np.repeat(np.arange(4), 25), 4
    )
    one_client = ClientPartition(client_indices=[np.arange(100)], alpha=1.0)
    assert skew_report(one_client, uniform)[0][2] == pytest.approx(0.0)

    skewed = LabeledImageSet(
        np.zeros((100, 1, 4, 4), dtype=np.float32), np.zeros(100, dtype=np.int64), 4
    )
    assert skew_report(one_client, skewed)[0][2] == pytest.approx(43.30, abs=0.01)


def test_planting_channel_replication(digits):
    ps = build_planting_set(digits, size=50, target_shape=(3, 16, 16), seed=0, source_name="digits")
    img = ps.samples.images
    assert img.shape == (50, 3, 16, 16)
    assert np.array_equal(img[:, 0], img[:, 1])
    assert np.array_equal(img[:, 0], img[:, 2])


def test_planting_sampling_contract(digits):
    ps = build_planting_set(digits, size=1000, target_shape=(3, 16, 16), seed=1, source_name="digits")
    assert ps.size == 1000 and len(ps.samples) == 1000
    assert len(np.unique(ps.samples.ids)) == 1000


def test_planting_too_large_and_bad_channels(digits):
    with pytest.raises(ConfigurationError):
        build_planting_set(digits, size=len(digits) + 1, target_shape=(3, 16, 16), seed=0)
    rgb = _toy_set(n=20)
    with pytest.raises(ConfigurationError):
        build_planting_set(rgb, size=5, target_shape=(2, 8, 8), seed=0)


def test_noise_planting_set():
    ps = make_noise_set(200, (3, 16, 16), n_classes=10, seed=0)
    img = ps.samples.images
    assert ps.source_name == "noise"
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert 0.0 < img.std() < 0.35
    assert set(np.unique(ps.samples.labels)) <= set(range(10))
    assert len(np.unique(ps.samples.labels)) >= 8  # roughly uniform over classes
    again = make_noise_set(200, (3, 16, 16), n_classes=10, seed=0)
    assert np.array_equal(img, again.samples.images)


def test_shapes_dataset_properties():
    data = make_shapes_dataset(300, seed=1)
    assert data.images.shape == (300, 3, 16, 16)
    assert data.images.min() >= 0.0 and data.images.max() <= 1.0
    assert data.labels.max() < 10
    again = make_shapes_dataset(300, seed=1)
    assert np.array_equal(data.images, again.images)
    assert np.array_equal(data.labels, again.labels)
