"""
Synthetic labelled videos of moving blobs, and Dirichlet label-skew partitioning across clients.
"""
from src.core.schemas import SyntheticVideoSpec, PartitionSpec, MotionSpec

from collections import namedtuple
from typing import List, Sequence

import numpy as np
import logging

logger = logging.getLogger('root')

SPLIT_KEYS = {'train': 0, 'test': 1}


class PartitionError(ValueError):
    pass


VideoDataset = namedtuple('VideoDataset', ['videos', 'labels'])
DatasetSplits = namedtuple('DatasetSplits', ['train', 'test'])


def render_blob(motion: MotionSpec, spec: SyntheticVideoSpec, start: np.ndarray) -> np.ndarray:
    """
    Renders one (frames, H, W) intensity volume of a blob travelling from `start` with the motion's
    velocity.
    """
    rows, cols = np.meshgrid(np.arange(spec.height, dtype=np.float64), np.arange(spec.width, dtype=np.float64), indexing='ij')
    velocity = np.asarray(motion.velocity)
    volume = np.zeros((spec.frames, spec.height, spec.width))

    for t in range(spec.frames):
        cx, cy = start + t * velocity
        dx, dy = cols - cx, rows - cy
        if motion.shape == 'gaussian':
            frame = np.exp(-(dx * dx + dy * dy) / (2.0 * spec.radius ** 2))
        elif motion.shape == 'square':
            frame = (np.maximum(np.abs(dx), np.abs(dy)) <= spec.radius).astype(np.float64)
        else:
            distance = np.sqrt(dx * dx + dy * dy)
            frame = (np.abs(distance - spec.radius) <= 0.75).astype(np.float64)
        volume[t] = frame
    return volume


def render_sample(spec: SyntheticVideoSpec, motion: MotionSpec, rng: np.random.Generator) -> np.ndarray:
    center = np.array([(spec.width - 1) / 2.0, (spec.height - 1) / 2.0])
    travel = np.asarray(motion.velocity) * (spec.frames - 1) / 2.0
    jitter = rng.uniform(-1.0, 1.0, size=2) * np.array([spec.width, spec.height]) / 8.0
    volume = render_blob(motion, spec, center - travel + jitter)

    video = np.repeat(volume[..., None], spec.channels, axis=-1)
    if spec.noise > 0:
        video = video + rng.normal(0.0, spec.noise, size=video.shape)
    return video.astype(np.float32)


def generate_split(spec: SyntheticVideoSpec, seed: int, split: str) -> VideoDataset:
    count = spec.train_samples if split == 'train' else spec.test_samples
    motions = spec.resolved_motions()

    order_rng = np.random.default_rng([seed, SPLIT_KEYS[split]])
    labels = order_rng.permutation(np.arange(count) % spec.classes).astype(np.int64)

    videos = np.zeros((count, spec.frames, spec.height, spec.width, spec.channels), dtype=np.float32)
    for i, label in enumerate(labels):
        # every sample has its own stream, so samples can be rendered in any order
        sample_rng = np.random.default_rng([seed, SPLIT_KEYS[split], i])
        videos[i] = render_sample(spec, motions[label], sample_rng)
    return VideoDataset(videos, labels)


def generate_dataset(spec: SyntheticVideoSpec, seed: int) -> DatasetSplits:
    """
    Deterministic train/test splits; the two splits draw from separate seed streams.
    """
    return DatasetSplits(generate_split(spec, seed, 'train'), generate_split(spec, seed, 'test'))


def shuffle_frames(dataset: VideoDataset, seed: int) -> VideoDataset:
    """
    Same videos with their frames in an independent random order each, which destroys motion but keeps
    every single-frame appearance.
    """
    rng = np.random.default_rng(seed)
    videos = np.stack([video[rng.permutation(video.shape[0])] for video in dataset.videos]) if len(dataset.videos) \
        else dataset.videos.copy()
    return VideoDataset(videos, dataset.labels.copy())


def subset(dataset: VideoDataset, indices: Sequence[int]) -> VideoDataset:
    indices = np.asarray(indices, dtype=np.int64)
    return VideoDataset(dataset.videos[indices], dataset.labels[indices])


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """
    Integer counts summing to `total` that follow `proportions` as closely as possible.
    """
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    shortfall = total - counts.sum()
    if shortfall > 0:
        # ties go to the lower client id
        order = np.lexsort((np.arange(len(raw)), -(raw - counts)))
        counts[order[:shortfall]] += 1
    return counts


def _draw_partition(labels: np.ndarray, clients: int, alpha: float, rng: np.random.Generator) -> List[List[int]]:
    shards: List[List[int]] = [[] for _ in range(clients)]
    for label in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == label))
        proportions = np.nan_to_num(rng.dirichlet(np.full(clients, alpha)))
        if proportions.sum() <= 0:
            proportions = np.eye(clients)[rng.integers(clients)]
        proportions = proportions / proportions.sum()

        counts = largest_remainder(proportions, len(members))
        for client, chunk in enumerate(np.split(members, np.cumsum(counts)[:-1])):
            shards[client].extend(int(i) for i in chunk)
    return [sorted(shard) for shard in shards]


def dirichlet_partition(labels: Sequence[int], spec: PartitionSpec) -> List[List[int]]:
    """
    For each class, draws client proportions p ~ Dir(α·1_N) and splits that class's samples by p with
    largest-remainder rounding.

    A draw that leaves a client empty is redrawn with the next sub-seed, up to `spec.max_retries`
    times; after that, empty clients each take one sample from the currently largest client.

    Returns:
        - List[List[int]]: Sorted sample indices per client; disjoint, covering every index.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise PartitionError("Cannot partition an empty label set.")
    if not spec.alpha > 0:
        raise PartitionError(f"Dirichlet concentration must be positive, got {spec.alpha}.")
    if spec.clients > labels.size:
        raise PartitionError(f"{labels.size} samples cannot fill {spec.clients} clients.")

    shards = []
    for attempt in range(spec.max_retries + 1):
        rng = np.random.default_rng([spec.seed, attempt])
        shards = _draw_partition(labels, spec.clients, spec.alpha, rng)
        if all(shards):
            return shards
        logger.warning(f"Partition draw {attempt} left a client empty; redrawing.")

    for client, shard in enumerate(shards):
        if not shard:
            donor = max(range(spec.clients), key=lambda k: (len(shards[k]), -k))
            shard.append(shards[donor].pop())
    return [sorted(shard) for shard in shards]


def label_distribution(labels: np.ndarray, classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=classes).astype(np.float64)
    return counts / counts.sum() if counts.sum() else counts


def heterogeneity_score(partition: Sequence[Sequence[int]], labels: Sequence[int]) -> float:
    """
    Sample-weighted mean total-variation distance between each client's label distribution and the
    global one. 0 means every client looks like the whole dataset.
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes = int(labels.max()) + 1
    reference = label_distribution(labels, classes)
    total = sum(len(shard) for shard in partition)
    if total == 0:
        return 0.0

    score = 0.0
    for shard in partition:
        if not len(shard):
            continue
        local = label_distribution(labels[np.asarray(shard, dtype=np.int64)], classes)
        score += len(shard) / total * 0.5 * np.abs(local - reference).sum()
    return float(score)
