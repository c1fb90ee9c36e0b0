from scipy.stats import truncnorm

from src.core.schemas import BackboneConfig, PeftStrategy, ParameterCount, ConfigError, BUFFER_NAMES, block_prefix
from src.core.tensor import Tensor, DimensionError, RunningStats, linear, layer_norm, softmax, gelu, mean, \
                            batch_norm_no_affine, scale

from collections import namedtuple
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import copy
import math


ParameterEntry = namedtuple('ParameterEntry', ['name', 'shape', 'trainable', 'region', 'kind'])


def region_of(name: str) -> str:
    """
    The classification head and the BatchNorm buffers in front of it form the predictor θ^p; everything
    else, prompts and adapters included, belongs to the backbone θ^f.
    """
    return 'predictor' if name.startswith('head.') or name.startswith('fc_norm.') else 'backbone'


class ParameterRegistry():
    """
    A named catalog of every tensor of a model. Iteration is lexicographic by name, which is also the
    order used for checkpoints and aggregation.

    Methods:
        - register: Adds a parameter or buffer.
        - set_trainable: Flags a parameter as trainable or frozen.
        - trainable_names: Names of the transmitted-and-trained subset θ.
        - transmitted_names: θ plus the buffers synchronized along with it.
        - state: A name -> ndarray copy of selected entries.
        - load_state: Writes values back into the registered tensors.
    """

    def __init__(self):
        self._tensors: Dict[str, Tensor] = {}
        self._kinds: Dict[str, str] = {}

    def __contains__(self, name: str):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def __iter__(self) -> Iterator[ParameterEntry]:
        for name in sorted(self._tensors):
            yield self.entry(name)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"No parameter named <{name}> in the registry.")

    def entry(self, name: str) -> ParameterEntry:
        tensor = self._tensors[name]
        return ParameterEntry(name, tensor.shape, tensor.requires_grad, region_of(name), self._kinds[name])

    def names(self) -> List[str]:
        return sorted(self._tensors)

    def register(self, name: str, tensor: Tensor, kind: str = 'parameter'):
        if name in self._tensors:
            raise ConfigError(f"Parameter <{name}> is already registered.")
        tensor.name = name
        tensor.requires_grad = False
        self._tensors[name] = tensor
        self._kinds[name] = kind

    def set_trainable(self, name: str, trainable: bool):
        if self._kinds[name] == 'buffer' and trainable:
            raise ConfigError(f"Buffer <{name}> cannot be trained.")
        self._tensors[name].requires_grad = trainable

    def parameters(self) -> List[str]:
        return [name for name in self.names() if self._kinds[name] == 'parameter']

    def buffers(self) -> List[str]:
        return [name for name in self.names() if self._kinds[name] == 'buffer']

    def trainable_names(self) -> List[str]:
        return [name for name in self.parameters() if self._tensors[name].requires_grad]

    def frozen_names(self) -> List[str]:
        return [name for name in self.parameters() if not self._tensors[name].requires_grad]

    def transmitted_names(self, sync_buffers: bool = True) -> List[str]:
        names = self.trainable_names()
        head_trainable = any(name.startswith('head.') for name in names)
        if sync_buffers and head_trainable:
            names = sorted(names + self.buffers())
        return names

    def numel(self, names: Sequence[str] = None) -> int:
        names = self.names() if names is None else names
        return int(sum(self._tensors[name].size for name in names))

    def state(self, names: Sequence[str] = None) -> Dict[str, np.ndarray]:
        names = self.names() if names is None else names
        return {name: self._tensors[name].data.copy() for name in sorted(names)}

    def load_state(self, state: Dict[str, np.ndarray], strict: bool = True, exclude: Sequence[str] = ()):
        """
        Copies values into the registered tensors, keeping each tensor's dtype.

        Args:
            - state (Dict[str, np.ndarray]): Values by name.
            - strict (bool, optional): Every name in `state` must be registered with the same shape. Defaults to True.
            - exclude (Sequence[str], optional): Name prefixes to skip. Defaults to ().
        """
        for name, value in state.items():
            if any(name.startswith(prefix) for prefix in exclude):
                continue
            if name not in self._tensors:
                if strict:
                    raise KeyError(f"No parameter named <{name}> in the registry.")
                continue
            target = self._tensors[name]
            if target.shape != tuple(value.shape):
                raise DimensionError(f"Parameter <{name}> has shape {target.shape}, got {tuple(value.shape)}.")
            target.data = np.array(value, dtype=target.dtype)


def trunc_normal(shape: tuple, rng: np.random.Generator, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    if math.prod(shape) == 0:
        return np.zeros(shape, dtype=dtype)
    values = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)
    return np.asarray(values, dtype=dtype)


def parameter_shapes(config: BackboneConfig) -> Dict[str, tuple]:
    """
    Shapes of every base parameter of the backbone, computed from the config alone.
    """
    d, hidden = config.dim, config.hidden
    shapes = {
        'patch_embed.weight': (config.tubelet_dim, d)
        , 'patch_embed.bias': (d,)
        , 'pos_embed': (config.num_tokens, d)
        , 'norm.gain': (d,)
        , 'norm.bias': (d,)
        , 'head.weight': (d, config.classes)
        , 'head.bias': (config.classes,)
    }
    for i in range(config.layers):
        prefix = block_prefix(i)
        shapes.update({
            f"{prefix}.norm1.gain": (d,)
            , f"{prefix}.norm1.bias": (d,)
            , f"{prefix}.attn.qkv.weight": (d, 3 * d)
            , f"{prefix}.attn.qkv.bias": (3 * d,)
            , f"{prefix}.attn.proj.weight": (d, d)
            , f"{prefix}.attn.proj.bias": (d,)
            , f"{prefix}.norm2.gain": (d,)
            , f"{prefix}.norm2.bias": (d,)
            , f"{prefix}.mlp.fc1.weight": (d, hidden)
            , f"{prefix}.mlp.fc1.bias": (hidden,)
            , f"{prefix}.mlp.fc2.weight": (hidden, d)
            , f"{prefix}.mlp.fc2.bias": (d,)
        })
    return shapes


def buffer_shapes(config: BackboneConfig) -> Dict[str, tuple]:
    return {name: (config.dim,) for name in BUFFER_NAMES}


def count_parameters(config: BackboneConfig, strategy: PeftStrategy, sync_batchnorm: bool = True) -> ParameterCount:
    """
    Closed-form parameter accounting; nothing is allocated, so full-size configurations are cheap.

    Returns:
        - ParameterCount: `total` is |Θ| including strategy-added parameters, `trainable` is |θ|,
          `transmitted` adds the BatchNorm buffers that travel with the head.
    """
    shapes = {**parameter_shapes(config), **strategy.added_shapes(config)}
    sizes = {name: math.prod(shape) for name, shape in shapes.items()}

    trainable_names = [name for name in sizes if strategy.is_trainable(name)]
    trainable = sum(sizes[name] for name in trainable_names)
    buffers = sum(math.prod(shape) for shape in buffer_shapes(config).values())
    head_trainable = any(name.startswith('head.') for name in trainable_names)

    by_region = {'backbone': 0, 'predictor': 0}
    for name, size in sizes.items():
        by_region[region_of(name)] += size

    return ParameterCount(
        total=sum(sizes.values())
        , trainable=trainable
        , transmitted=trainable + (buffers if sync_batchnorm and head_trainable else 0)
        , buffers=buffers
        , by_region=by_region
    )


def tubelets(videos: np.ndarray, config: BackboneConfig) -> np.ndarray:
    """
    Cuts videos (B, frames, H, W, channels) into non-overlapping tubelet x patch x patch blocks and
    flattens them into tokens (B, N_tok, tubelet_dim), tokens in (temporal, height, width) order.
    """
    B = videos.shape[0]
    D, Hp, Wp = config.grid
    t, p, c = config.tubelet, config.patch, config.channels
    blocks = videos.reshape(B, D, t, Hp, p, Wp, p, c).transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return blocks.reshape(B, D * Hp * Wp, t * p * p * c)


class Block():
    """
    A pre-norm transformer block. The MLP half can be taken over by an adapter hook, and a prompt hook
    can wrap the block to prepend and strip per-layer tokens.
    """

    def __init__(self, index: int, registry: ParameterRegistry, config: BackboneConfig):
        self.index = index
        self.prefix = block_prefix(index)
        self.registry = registry
        self.config = config
        self.adapter = None
        self.prompt = None

    def param(self, suffix: str) -> Tensor:
        return self.registry[f"{self.prefix}.{suffix}"]

    def norm1(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.param('norm1.gain'), self.param('norm1.bias'))

    def norm2(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.param('norm2.gain'), self.param('norm2.bias'))

    def attention(self, x: Tensor) -> Tensor:
        B, N, d = x.shape
        heads = self.config.heads
        head_dim = d // heads

        qkv = linear(x, self.param('attn.qkv.weight'), self.param('attn.qkv.bias'))
        qkv = qkv.reshape(B, N, 3, heads, head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]

        scores = scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(head_dim))
        context = softmax(scores, axis=-1) @ v
        context = context.transpose(0, 2, 1, 3).reshape(B, N, d)
        return linear(context, self.param('attn.proj.weight'), self.param('attn.proj.bias'))

    def mlp(self, x: Tensor) -> Tensor:
        hidden = gelu(linear(x, self.param('mlp.fc1.weight'), self.param('mlp.fc1.bias')))
        return linear(hidden, self.param('mlp.fc2.weight'), self.param('mlp.fc2.bias'))

    def mlp_residual(self, x_hat: Tensor) -> Tensor:
        """
        The unadapted second half of the block: X̂ + MLP(NL(X̂)).
        """
        return x_hat + self.mlp(self.norm2(x_hat))

    def __call__(self, x: Tensor) -> Tensor:
        if self.prompt is not None:
            x = self.prompt.inject(x)

        x_hat = x + self.attention(self.norm1(x))
        if self.adapter is not None:
            out = self.adapter(self, x_hat)
        else:
            out = self.mlp_residual(x_hat)

        if self.prompt is not None:
            out = self.prompt.strip(out)
        return out


class Backbone():
    """
    Video transformer: tubelet embedding, learned positional embedding, `layers` pre-norm blocks, a final
    LayerNorm, mean pooling over tokens, BatchNorm without affine and a linear head.

    Attributes:
        - config (BackboneConfig): The architecture.
        - registry (ParameterRegistry): Every parameter and buffer.
        - blocks (List[Block]): The transformer blocks in depth order.
        - strategy (PeftStrategy): The fine-tuning strategy once one has been applied.
    """

    def __init__(self, config: BackboneConfig, registry: ParameterRegistry, dtype=np.float32):
        self.config = config
        self.registry = registry
        self.dtype = np.dtype(dtype)
        self.blocks = [Block(i, registry, config) for i in range(config.layers)]
        self.strategy: Optional[PeftStrategy] = None
        self.bn_stats = RunningStats(registry['fc_norm.running_mean'], registry['fc_norm.running_var'])

    def clone(self) -> 'Backbone':
        return copy.deepcopy(self)

    def check_input(self, videos: np.ndarray):
        height, width = self.config.frame_size
        expected = (self.config.frames, height, width, self.config.channels)
        if videos.ndim != 5 or tuple(videos.shape[1:]) != expected:
            raise DimensionError(f"Expected videos of shape (B, {', '.join(map(str, expected))}), got {tuple(videos.shape)}.")

    def embed(self, videos: np.ndarray) -> Tensor:
        self.check_input(videos)
        tokens = Tensor(tubelets(np.asarray(videos, dtype=self.dtype), self.config))
        x = linear(tokens, self.registry['patch_embed.weight'], self.registry['patch_embed.bias'])
        return x + self.registry['pos_embed']

    def features(self, videos: np.ndarray) -> Tensor:
        """
        Pooled pre-head features (after the final LayerNorm, before BatchNorm).
        """
        x = self.embed(videos)
        for block in self.blocks:
            x = block(x)
        x = layer_norm(x, self.registry['norm.gain'], self.registry['norm.bias'])
        return mean(x, axis=1)

    def forward(self, videos: np.ndarray, mode: str = 'eval') -> Tensor:
        """
        Computes logits (B, C). In `train` mode BatchNorm uses batch statistics and updates its running
        statistics; the graph is recorded when called inside an active `Tape`.
        """
        pooled = self.features(videos)
        normed = batch_norm_no_affine(pooled, self.bn_stats, mode=mode)
        return linear(normed, self.registry['head.weight'], self.registry['head.bias'])

    __call__ = forward

    def replace_head(self, classes: int, seed: int):
        """
        Swaps in a freshly initialized head for `classes` outputs, e.g. after upstream pre-training.
        """
        rng = np.random.default_rng([seed, 7])
        self.registry['head.weight'].data = trunc_normal((self.config.dim, classes), rng, dtype=self.dtype)
        self.registry['head.bias'].data = np.zeros(classes, dtype=self.dtype)
        self.config = self.config.copy(update={'classes': classes})
        for block in self.blocks:
            block.config = self.config


def build_backbone(config: BackboneConfig, seed: int, dtype=np.float32) -> Backbone:
    """
    Allocates and initializes a backbone: truncated-normal (std 0.02) weights and embeddings, zero
    biases, unit LayerNorm gains, BatchNorm running statistics at mean 0 / variance 1. Every parameter
    starts out trainable-less; a `PeftStrategy` decides what trains.
    """
    rng = np.random.default_rng(seed)
    registry = ParameterRegistry()

    for name, shape in parameter_shapes(config).items():
        if name.endswith('.bias'):
            value = np.zeros(shape, dtype=dtype)
        elif name.endswith('.gain'):
            value = np.ones(shape, dtype=dtype)
        else:
            value = trunc_normal(shape, rng, dtype=dtype)
        registry.register(name, Tensor(value))

    registry.register('fc_norm.running_mean', Tensor(np.zeros(config.dim, dtype=dtype)), kind='buffer')
    registry.register('fc_norm.running_var', Tensor(np.ones(config.dim, dtype=dtype)), kind='buffer')

    return Backbone(config, registry, dtype=dtype)
