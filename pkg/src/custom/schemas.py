from src.core.schemas import BackboneConfig, PeftStrategy, TrainConfig, PartitionSpec, SyntheticVideoSpec, ConfigError

from pydantic import BaseModel, validator, root_validator
from typing import Literal, Optional

import json
import os

SELF_PATH = os.path.dirname(os.path.abspath(__file__))
EXPERIMENT_SCHEMA = 'fedpeft/experiment-v1'


def load_presets() -> dict:
    with open(f"{SELF_PATH}/presets.json", "r") as f:
        return json.load(f)['backbones']


def resolve_backbone(section) -> dict:
    """
    Expands `{preset: <name>, ...overrides}` into a full backbone section.
    """
    if isinstance(section, BackboneConfig) or section is None:
        return section
    section = dict(section)
    name = section.pop('preset', None)
    if name is None:
        return section

    presets = load_presets()
    if name not in presets:
        raise ConfigError(f"Unknown backbone preset <{name}>; available: {', '.join(sorted(presets))}.")
    return {**presets[name], **section}


class UpstreamConfig(BaseModel):
    """
    The central pre-training stage: a related task with its own class grammar, same input shape.
    """

    dataset: SyntheticVideoSpec = SyntheticVideoSpec(grammar='upstream', train_samples=2000, test_samples=400)
    epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    checkpoint: Optional[str] = None

    @validator('epochs', 'batch_size')
    def validate_positive(cls, value):
        if value < 1:
            raise ValueError("Must be at least 1.")
        return value


class PrivacyConfig(BaseModel):
    n: int = 0
    end: Literal['first'] | Literal['last'] = 'last'
    placement: Literal['matching'] | Literal['last'] = 'matching'
    distill_epochs: int = 4
    distill_lr: float = 0.01
    distill_batch_size: int = 16

    @validator('n', 'distill_epochs')
    def validate_non_negative(cls, value):
        if value < 0:
            raise ValueError("Cannot be negative.")
        return value


class ExperimentConfig(BaseModel):
    """
    One experiment file. `seed` drives the dataset, the partition, the initialization and every client
    stream, so the same file and seed always produce the same metrics.
    """

    schema_: str = EXPERIMENT_SCHEMA
    label: Optional[str] = None
    seed: int
    init: Literal['pretrained'] | Literal['scratch'] = 'pretrained'
    output_dir: str = 'runs/experiment'
    target_accuracy: Optional[float] = None
    backbone: BackboneConfig = BackboneConfig()
    strategy: PeftStrategy = PeftStrategy()
    train: TrainConfig = TrainConfig()
    partition: PartitionSpec = PartitionSpec()
    dataset: SyntheticVideoSpec = SyntheticVideoSpec()
    upstream: UpstreamConfig = UpstreamConfig()
    privacy: Optional[PrivacyConfig] = None

    class Config:
        fields = {'schema_': 'schema'}
        allow_population_by_field_name = True

    @validator('schema_')
    def validate_schema(cls, value):
        if value != EXPERIMENT_SCHEMA:
            raise ConfigError(f"Unsupported config schema <{value}>, expected <{EXPERIMENT_SCHEMA}>.")
        return value

    @validator('backbone', pre=True)
    def validate_backbone(cls, value):
        return resolve_backbone(value)

    @validator('target_accuracy')
    def validate_target(cls, value):
        if value is not None and not 0 <= value <= 1:
            raise ValueError("Target accuracy is a fraction in [0, 1].")
        return value

    @root_validator(skip_on_failure=True)
    def validate_consistency(cls, values):
        backbone, dataset = values['backbone'], values['dataset']
        height, width = backbone.frame_size
        if (dataset.frames, dataset.height, dataset.width, dataset.channels) != (backbone.frames, height, width, backbone.channels):
            raise ValueError("Dataset videos do not match the backbone's input shape.")
        if dataset.classes != backbone.classes:
            raise ValueError(f"Dataset has {dataset.classes} classes, backbone head has {backbone.classes}.")

        upstream = values['upstream'].dataset
        if (upstream.frames, upstream.height, upstream.width, upstream.channels) != (backbone.frames, height, width, backbone.channels):
            raise ValueError("Upstream videos do not match the backbone's input shape.")

        if values['partition'].clients != values['train'].clients:
            raise ValueError(f"Partition has {values['partition'].clients} clients, train config {values['train'].clients}.")

        privacy = values.get('privacy')
        if privacy is not None and privacy.n:
            if privacy.n >= backbone.layers:
                raise ValueError(f"Cannot drop {privacy.n} of {backbone.layers} blocks.")
            if values['strategy'].kind != 'adapter':
                raise ValueError("The compressed-model path trains adapters only.")
        return values

    @property
    def name(self) -> str:
        return self.label or self.strategy.label

    def resolved(self) -> 'ExperimentConfig':
        """
        A copy whose train and partition sections carry the experiment seed.
        """
        return self.copy(update={
            'train': self.train.copy(update={'seed': self.seed})
            , 'partition': self.partition.copy(update={'seed': self.seed})
        })
