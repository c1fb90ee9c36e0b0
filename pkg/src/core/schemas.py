from pydantic import BaseModel, validator, root_validator
from typing import List, Any, Optional, Literal, Tuple, Dict

import math


class ConfigError(ValueError):
    """
    Raised when a configuration cannot describe a valid model, strategy or experiment.
    """


LINEAR_MODULES = ('patch_embed', 'qkv', 'proj', 'fc1', 'fc2')
BUFFER_NAMES = ('fc_norm.running_mean', 'fc_norm.running_var')


def block_prefix(index: int) -> str:
    """
    Registry prefix of transformer block `index`. Zero-padded so lexicographic order is depth order.
    """
    return f"blocks.{index:02d}"


class BackboneConfig(BaseModel):
    layers: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    frames: int = 8
    frame_size: Tuple[int, int] = (32, 32)
    channels: int = 3
    patch: int = 8
    tubelet: int = 2
    classes: int = 8

    @validator('layers', 'dim', 'heads', 'frames', 'channels', 'patch', 'tubelet')
    def validate_positive(cls, value):
        if value < 1:
            raise ValueError("Must be a positive count.")
        return value

    @validator('classes')
    def validate_classes(cls, value):
        if value < 0:
            raise ValueError("Class count cannot be negative.")
        return value

    @root_validator(skip_on_failure=True)
    def validate_divisibility(cls, values):
        height, width = values['frame_size']
        if height % values['patch'] or width % values['patch']:
            raise ValueError(f"Frame size {height}x{width} is not divisible by patch {values['patch']}.")
        if values['frames'] % values['tubelet']:
            raise ValueError(f"{values['frames']} frames are not divisible by tubelet {values['tubelet']}.")
        if values['dim'] % values['heads']:
            raise ValueError(f"Width {values['dim']} is not divisible by {values['heads']} heads.")
        return values

    @property
    def grid(self) -> Tuple[int, int, int]:
        """
        Token grid (D, H, W) in temporal-major order.
        """
        height, width = self.frame_size
        return self.frames // self.tubelet, height // self.patch, width // self.patch

    @property
    def num_tokens(self) -> int:
        return math.prod(self.grid)

    @property
    def hidden(self) -> int:
        return int(round(self.mlp_ratio * self.dim))

    @property
    def tubelet_dim(self) -> int:
        return self.tubelet * self.patch * self.patch * self.channels


class AdapterConfig(BaseModel):
    bottleneck: int = 64
    scale: float = 2.5
    kernel: Tuple[int, int, int] = (3, 3, 3)
    placement: Literal['parallel'] | Literal['sequential'] = 'parallel'
    temporal: bool = True
    activation: Literal['gelu'] | Literal['none'] = 'gelu'

    @validator('bottleneck')
    def validate_bottleneck(cls, value):
        if value < 1:
            raise ValueError("Bottleneck must be at least 1.")
        return value

    @validator('scale')
    def validate_scale(cls, value):
        if value < 0:
            raise ValueError("Adapter scale cannot be negative.")
        return value

    @validator('kernel')
    def validate_kernel(cls, value):
        if any(extent < 1 or extent % 2 == 0 for extent in value):
            raise ValueError(f"Kernel extents must be odd, got {value}.")
        return value

    @property
    def variant(self) -> str:
        if not self.temporal:
            return 'spatial'
        return self.placement

    def parameter_shapes(self, dim: int) -> Dict[str, tuple]:
        """
        Shapes of one block's adapter parameters, keyed by their suffix under `<block>.adapter.`.
        """
        shapes = {
            'down.weight': (dim, self.bottleneck)
            , 'down.bias': (self.bottleneck,)
            , 'up.weight': (self.bottleneck, dim)
            , 'up.bias': (dim,)
        }
        if self.temporal:
            shapes['conv.weight'] = (*self.kernel, self.bottleneck)
            shapes['conv.bias'] = (self.bottleneck,)
        return shapes


class PeftStrategy(BaseModel):
    """
    Declares which parameters exist on top of the backbone and which of them train (the transmitted
    subset θ).
    """

    kind: Literal['full'] \
        | Literal['linear_probe'] \
        | Literal['bias_tune'] \
        | Literal['prompt_tune'] \
        | Literal['adapter'] = 'adapter'
    adapter: Optional[AdapterConfig] = None
    prompt_tokens: int = 8

    @root_validator(skip_on_failure=True)
    def validate_kind(cls, values):
        if values['kind'] == 'adapter' and values.get('adapter') is None:
            values['adapter'] = AdapterConfig()
        if values['kind'] != 'adapter':
            values['adapter'] = None
        if values['prompt_tokens'] < 0:
            raise ValueError("Prompt token count cannot be negative.")
        return values

    @property
    def label(self) -> str:
        if self.kind == 'adapter':
            return f"adapter_{self.adapter.variant}"
        return self.kind

    def added_shapes(self, config: BackboneConfig) -> Dict[str, tuple]:
        shapes = {}
        for i in range(config.layers):
            if self.kind == 'prompt_tune' and self.prompt_tokens:
                shapes[f"{block_prefix(i)}.prompt"] = (self.prompt_tokens, config.dim)
            elif self.kind == 'adapter':
                for suffix, shape in self.adapter.parameter_shapes(config.dim).items():
                    shapes[f"{block_prefix(i)}.adapter.{suffix}"] = shape
        return shapes

    def is_trainable(self, name: str) -> bool:
        if name in BUFFER_NAMES:
            return False
        if self.kind == 'full' or name.startswith('head.'):
            return True
        if self.kind == 'bias_tune':
            parts = name.split('.')
            return parts[-1] == 'bias' and len(parts) > 1 and parts[-2] in LINEAR_MODULES
        if self.kind == 'prompt_tune':
            return name.endswith('.prompt')
        if self.kind == 'adapter':
            return '.adapter.' in name
        return False


class TrainConfig(BaseModel):
    local_epochs: int = 8
    batch_size: int = 8
    lr: float = 0.001
    momentum: float = 0.0
    rounds: int = 40
    clients: int = 16
    clients_per_round: Optional[int] = None
    sampling_rate: Optional[float] = None
    seed: int = 0
    sync_batchnorm: bool = True
    count_download: bool = False
    eval_batch_size: int = 64

    @validator('local_epochs', 'batch_size', 'clients', 'eval_batch_size')
    def validate_positive(cls, value):
        if value < 1:
            raise ValueError("Must be at least 1.")
        return value

    @validator('rounds')
    def validate_rounds(cls, value):
        if value < 0:
            raise ValueError("Round budget cannot be negative.")
        return value

    @validator('lr')
    def validate_lr(cls, value):
        if value < 0:
            raise ValueError("Learning rate cannot be negative.")
        return value

    @root_validator(skip_on_failure=True)
    def resolve_participants(cls, values):
        rate = values.get('sampling_rate')
        if rate is not None:
            if not 0 < rate <= 1:
                raise ValueError(f"Sampling rate must lie in (0, 1], got {rate}.")
            values['clients_per_round'] = max(int(round(rate * values['clients'])), 1)
        elif values.get('clients_per_round') is None:
            values['clients_per_round'] = min(4, values['clients'])

        if not 1 <= values['clients_per_round'] <= values['clients']:
            raise ValueError(f"Sampled clients must lie in [1, {values['clients']}], got {values['clients_per_round']}.")
        return values


class PartitionSpec(BaseModel):
    clients: int = 16
    alpha: float = 0.5
    seed: int = 0
    max_retries: int = 10

    @validator('clients')
    def validate_clients(cls, value):
        if value < 1:
            raise ValueError("At least one client is required.")
        return value


class MotionSpec(BaseModel):
    direction: Tuple[float, float] = (1.0, 0.0)
    speed: float = 2.0
    shape: Literal['gaussian'] | Literal['square'] | Literal['ring'] = 'gaussian'

    @validator('direction')
    def validate_direction(cls, value):
        norm = math.hypot(*value)
        if norm == 0:
            return (0.0, 0.0)
        return (value[0] / norm, value[1] / norm)

    @validator('speed')
    def validate_speed(cls, value):
        if value < 0:
            raise ValueError("Speed cannot be negative.")
        return value

    @property
    def velocity(self) -> Tuple[float, float]:
        return (self.direction[0] * self.speed, self.direction[1] * self.speed)


def grammar_motions(classes: int, grammar: str, speed: float, angle_offset: float = 0.0) -> List[MotionSpec]:
    """
    Per-class motions of a generated grammar: `directions` gives every class the same blob moving along
    evenly spaced headings; `upstream` mixes two blob shapes with headings offset by half a step.
    """
    motions = []
    if grammar == 'directions':
        for k in range(classes):
            angle = 2 * math.pi * k / classes + angle_offset
            motions.append(MotionSpec(direction=(math.cos(angle), math.sin(angle)), speed=speed))
    else:
        headings = max((classes + 1) // 2, 1)
        for k in range(classes):
            angle = 2 * math.pi * (k // 2) / headings + math.pi / headings + angle_offset
            shape = ('square', 'ring')[k % 2]
            motions.append(MotionSpec(direction=(math.cos(angle), math.sin(angle)), speed=speed, shape=shape))
    return motions


class SyntheticVideoSpec(BaseModel):
    """
    A class grammar of moving blobs. When `motions` is omitted it is generated from `grammar` (see
    `grammar_motions`); `upstream` is a related but disjoint task. Unless `allow_static_duplicates` is
    set, no two classes may share both blob shape and velocity, generated grammars included.
    """

    classes: int = 8
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    train_samples: int = 3000
    test_samples: int = 600
    noise: float = 0.05
    radius: float = 3.0
    speed: float = 2.0
    grammar: Literal['directions'] | Literal['upstream'] = 'directions'
    angle_offset: float = 0.0
    motions: Optional[List[MotionSpec]] = None
    allow_static_duplicates: bool = False

    @validator('classes', 'frames', 'height', 'width', 'channels')
    def validate_positive(cls, value):
        if value < 1:
            raise ValueError("Must be at least 1.")
        return value

    @root_validator(skip_on_failure=True)
    def validate_grammar(cls, values):
        motions = values.get('motions')
        if motions is not None and len(motions) != values['classes']:
            raise ValueError(f"Expected {values['classes']} motions, got {len(motions)}.")
        if values['allow_static_duplicates']:
            return values

        if motions is None:
            motions = grammar_motions(values['classes'], values['grammar'], values['speed'], values['angle_offset'])
        seen = set()
        for motion in motions:
            key = (motion.shape, round(motion.velocity[0], 9), round(motion.velocity[1], 9))
            if key in seen:
                raise ValueError(f"Two classes share shape <{motion.shape}> and motion {motion.velocity}.")
            seen.add(key)
        return values

    def resolved_motions(self) -> List[MotionSpec]:
        if self.motions is not None:
            return list(self.motions)
        return grammar_motions(self.classes, self.grammar, self.speed, self.angle_offset)


class ParameterCount(BaseModel):
    total: int
    trainable: int
    transmitted: int
    buffers: int
    by_region: Dict[str, int]


class RoundReport(BaseModel):
    round: int
    sampled: List[int]
    client_losses: Dict[int, float]
    accuracy: float
    param_count: int
    bytes_uploaded: int
    cumulative_bytes: int


DEFAULT_SUCCESS = 'Operation was successful.'


class SuccessMessages(BaseModel):
    client: str = DEFAULT_SUCCESS
    logger: Optional[str] = None

    def __init__(self, client: str = DEFAULT_SUCCESS, logger: str = None):
        super().__init__(client=client, logger=logger)


class RunOutput(BaseModel):
    """
    The result of a harness stage: its data, the process exit status it implies and a message.
    """

    data: Any
    status: int
    message: str

    class Config:
        arbitrary_types_allowed = True

    def __iter__(self):
        yield self.data
        yield self.status
        yield self.message
