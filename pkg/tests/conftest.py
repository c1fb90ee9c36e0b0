import sys
import os

current_dir = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.dirname(current_dir))

from src.core.schemas import BackboneConfig, SyntheticVideoSpec, TrainConfig, PartitionSpec
from src.core.models import build_backbone
from src.custom.datakit import generate_dataset

import numpy as np
import pytest


@pytest.fixture
def tiny_config() -> BackboneConfig:
    return BackboneConfig(layers=2, dim=16, heads=2, mlp_ratio=2.0, frames=4, frame_size=(8, 8), channels=1,
                          patch=4, tubelet=2, classes=4)


@pytest.fixture
def tiny_model(tiny_config):
    return build_backbone(tiny_config, seed=3)


@pytest.fixture
def tiny_videos(tiny_config):
    rng = np.random.default_rng(42)
    height, width = tiny_config.frame_size
    return rng.normal(size=(3, tiny_config.frames, height, width, tiny_config.channels)).astype(np.float32)


@pytest.fixture
def tiny_spec() -> SyntheticVideoSpec:
    return SyntheticVideoSpec(classes=4, frames=4, height=8, width=8, channels=1, train_samples=64, test_samples=32,
                              radius=1.5, speed=1.0)


@pytest.fixture
def tiny_splits(tiny_spec):
    return generate_dataset(tiny_spec, seed=1)


@pytest.fixture
def tiny_train() -> TrainConfig:
    return TrainConfig(local_epochs=1, batch_size=8, lr=0.05, rounds=2, clients=4, clients_per_round=2, seed=5)


@pytest.fixture
def tiny_partition() -> PartitionSpec:
    return PartitionSpec(clients=4, alpha=1.0, seed=5)


def build_experiment(output_dir, **sections) -> dict:
    """
    A raw experiment document over the tiny preset; sections override wholesale.
    """
    document = {
        'schema': 'fedpeft/experiment-v1'
        , 'seed': 0
        , 'init': 'scratch'
        , 'output_dir': str(output_dir)
        , 'target_accuracy': 0.3
        , 'backbone': {'preset': 'tiny'}
        , 'strategy': {'kind': 'adapter', 'adapter': {'bottleneck': 4}}
        , 'train': {'local_epochs': 1, 'batch_size': 8, 'lr': 0.05, 'rounds': 2, 'clients': 3, 'clients_per_round': 2}
        , 'partition': {'clients': 3, 'alpha': 1.0}
        , 'dataset': {'classes': 4, 'frames': 4, 'height': 8, 'width': 8, 'channels': 1, 'train_samples': 48,
                      'test_samples': 16, 'radius': 1.5, 'speed': 1.0}
        , 'upstream': {'epochs': 1, 'batch_size': 8, 'dataset': {'classes': 4, 'frames': 4, 'height': 8, 'width': 8,
                                                                 'channels': 1, 'train_samples': 32, 'test_samples': 16,
                                                                 'radius': 1.5, 'speed': 1.0, 'grammar': 'upstream'}}
    }
    document.update(sections)
    return document


@pytest.fixture
def tiny_experiment():
    return build_experiment
