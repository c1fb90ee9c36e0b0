from src.core.schemas import SyntheticVideoSpec, PartitionSpec, MotionSpec
from src.core.store import ArtifactManager
from src.custom.datakit import PartitionError, generate_dataset, shuffle_frames, dirichlet_partition, \
                               heterogeneity_score, label_distribution, largest_remainder

from pydantic import ValidationError

import numpy as np
import logging
import pytest
import json


def test_generation_is_deterministic_and_balanced(tiny_spec):
    first, second = generate_dataset(tiny_spec, seed=3), generate_dataset(tiny_spec, seed=3)
    assert np.array_equal(first.train.videos, second.train.videos)
    assert np.array_equal(first.test.labels, second.test.labels)

    assert first.train.videos.shape == (64, 4, 8, 8, 1)
    assert first.train.videos.dtype == np.float32
    assert np.array_equal(np.bincount(first.train.labels), [16, 16, 16, 16])
    assert not np.array_equal(first.train.videos[:32], first.test.videos)


def test_different_seeds_differ(tiny_spec):
    assert not np.array_equal(generate_dataset(tiny_spec, 0).train.videos, generate_dataset(tiny_spec, 1).train.videos)


def test_static_noiseless_classes_render_identical_frames():
    static = MotionSpec(direction=(1.0, 0.0), speed=0.0)
    spec = SyntheticVideoSpec(classes=3, frames=4, height=8, width=8, channels=1, train_samples=6, test_samples=3,
                              noise=0.0, motions=[static] * 3, allow_static_duplicates=True)
    videos = generate_dataset(spec, seed=0).train.videos
    assert np.all(videos == videos[:, :1])


def test_duplicate_motions_are_rejected_unless_allowed():
    motion = MotionSpec(direction=(0.0, 1.0), speed=1.0)
    with pytest.raises(ValidationError):
        SyntheticVideoSpec(classes=2, motions=[motion, motion])


def test_default_grammar_gives_distinct_motions():
    motions = SyntheticVideoSpec(classes=8).resolved_motions()
    velocities = {tuple(np.round(m.velocity, 6)) for m in motions}
    assert len(velocities) == 8


def test_shuffle_frames_keeps_every_frame():
    spec = SyntheticVideoSpec(classes=2, frames=6, height=8, width=8, channels=1, train_samples=4, test_samples=2,
                              motions=[MotionSpec(direction=(1.0, 0.0), speed=1.0), MotionSpec(direction=(-1.0, 0.0), speed=1.0)])
    dataset = generate_dataset(spec, seed=0).train
    shuffled = shuffle_frames(dataset, seed=1)
    assert np.array_equal(shuffled.labels, dataset.labels)
    for original, mixed in zip(dataset.videos, shuffled.videos):
        assert sorted(map(bytes, original)) == sorted(map(bytes, mixed))


def nearest_centroid_accuracy(train, test) -> float:
    flat_train, flat_test = train.videos.reshape(len(train.videos), -1), test.videos.reshape(len(test.videos), -1)
    centroids = np.stack([flat_train[train.labels == label].mean(axis=0) for label in (0, 1)])
    distances = ((flat_test[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float((distances.argmin(axis=1) == test.labels).mean())


def test_opposite_motions_need_frame_order():
    spec = SyntheticVideoSpec(classes=2, frames=8, height=16, width=16, channels=1, train_samples=200,
                              test_samples=200, radius=2.0,
                              motions=[MotionSpec(direction=(1.0, 0.0), speed=1.0), MotionSpec(direction=(-1.0, 0.0), speed=1.0)])
    splits = generate_dataset(spec, seed=0)
    ordered = nearest_centroid_accuracy(splits.train, splits.test)
    shuffled = nearest_centroid_accuracy(shuffle_frames(splits.train, seed=1), shuffle_frames(splits.test, seed=2))

    assert ordered >= 0.9
    assert abs(shuffled - 0.5) <= 0.15
    assert ordered > shuffled


def test_generated_grammar_with_static_blobs_is_rejected():
    with pytest.raises(ValidationError):
        SyntheticVideoSpec(classes=4, speed=0.0)
    with pytest.raises(ValidationError):
        SyntheticVideoSpec(classes=4, speed=0.0, grammar='upstream')

    spec = SyntheticVideoSpec(classes=4, speed=0.0, allow_static_duplicates=True)
    assert all(motion.velocity == (0.0, 0.0) for motion in spec.resolved_motions())
    assert SyntheticVideoSpec(classes=2, speed=0.0, grammar='upstream').classes == 2


def test_largest_remainder_sums_to_total():
    counts = largest_remainder(np.array([0.5, 0.3, 0.2]), 7)
    assert counts.sum() == 7
    assert list(counts) == [4, 2, 1]


def test_partition_is_exact_and_non_empty():
    labels = np.random.default_rng(0).integers(0, 10, size=500)
    partition = dirichlet_partition(labels, PartitionSpec(clients=16, alpha=0.1, seed=3))
    flat = sorted(i for shard in partition for i in shard)
    assert flat == list(range(500))
    assert all(len(shard) > 0 for shard in partition)
    assert partition == dirichlet_partition(labels, PartitionSpec(clients=16, alpha=0.1, seed=3))


def test_single_client_gets_everything():
    labels = np.arange(30) % 3
    assert dirichlet_partition(labels, PartitionSpec(clients=1, alpha=0.5)) == [list(range(30))]


def test_large_alpha_approaches_global_histogram():
    labels = np.repeat(np.arange(10), 160)
    partition = dirichlet_partition(labels, PartitionSpec(clients=16, alpha=1e6, seed=0))
    reference = label_distribution(labels, 10)
    for shard in partition:
        local = label_distribution(labels[shard], 10)
        assert 0.5 * np.abs(local - reference).sum() <= 0.02


@pytest.mark.parametrize('alpha', [0.0, -1.0])
def test_non_positive_alpha_is_rejected(alpha):
    with pytest.raises(PartitionError):
        dirichlet_partition([0, 1, 2], PartitionSpec(clients=2, alpha=alpha))


def test_empty_labels_are_rejected():
    with pytest.raises(PartitionError):
        dirichlet_partition([], PartitionSpec(clients=2))


def test_heterogeneity_closed_forms():
    labels = np.repeat(np.arange(4), 5)
    one_class_each = [list(range(5 * k, 5 * k + 5)) for k in range(4)]
    assert heterogeneity_score(one_class_each, labels) == pytest.approx(0.75)

    mirrors = [[5 * c + k for c in range(4)] for k in range(5)]
    assert heterogeneity_score(mirrors, labels) == pytest.approx(0.0)


def test_heterogeneity_matches_brute_force():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 5, size=200)
    partition = dirichlet_partition(labels, PartitionSpec(clients=6, alpha=0.3, seed=2))

    expected = 0.0
    for shard in partition:
        for c in range(5):
            local = np.mean(labels[shard] == c)
            expected += len(shard) / 200 * 0.5 * abs(local - np.mean(labels == c))
    assert heterogeneity_score(partition, labels) == pytest.approx(expected, abs=1e-12)


def test_heterogeneity_decreases_with_alpha():
    labels = np.random.default_rng(7).integers(0, 10, size=1000)

    def mean_score(alpha):
        return np.mean([heterogeneity_score(dirichlet_partition(labels, PartitionSpec(clients=16, alpha=alpha, seed=s)), labels)
                        for s in range(20)])

    assert mean_score(0.1) > mean_score(0.5) > mean_score(1.0)


def test_dataset_dump(tmp_path, tiny_splits):
    artifacts = ArtifactManager(tmp_path, logging.getLogger('root'))
    manifest_path = artifacts.dump_dataset(tiny_splits.test, 'test')

    manifest = json.loads(manifest_path.read_text())
    frames = np.fromfile(tmp_path / manifest['frames_file'], dtype='<f4').reshape(manifest['shape'])
    assert np.array_equal(frames, tiny_splits.test.videos)
    assert manifest['labels'] == [int(label) for label in tiny_splits.test.labels]
