"""
Parameter-efficient fine-tuning strategies. A strategy instruments a built backbone in place: it
registers the extra parameters it needs (per-layer prompts or per-block adapters), hooks them into the
blocks and flags which parameters train.
"""
from src.core.models import Backbone, Block, trunc_normal
from src.core.schemas import AdapterConfig, PeftStrategy
from src.core.tensor import Tensor, DimensionError, linear, gelu, scale, depthwise_conv3d, concat, expand

from collections import namedtuple
from typing import Optional

import numpy as np
import logging

logger = logging.getLogger('root')


class StrategyError(RuntimeError):
    pass


AdapterParams = namedtuple('AdapterParams', ['down_weight', 'down_bias', 'conv_weight', 'conv_bias', 'up_weight', 'up_bias'])


def delta_kernel(kernel: tuple, channels: int, dtype=np.float32) -> np.ndarray:
    """
    Depthwise kernel that maps its input to itself: 1 at the center tap, 0 elsewhere.
    """
    value = np.zeros((*kernel, channels), dtype=dtype)
    value[kernel[0] // 2, kernel[1] // 2, kernel[2] // 2, :] = 1.0
    return value


def _to_grid(x: Tensor, grid: tuple) -> Tensor:
    B, N, channels = x.shape
    D, H, W = grid
    if N != D * H * W:
        raise DimensionError(f"{N} tokens cannot be laid out on a {D}x{H}x{W} grid.")
    return x.reshape(B, D, H, W, channels)


def bottleneck(x_prime: Tensor, params: AdapterParams, config: AdapterConfig, grid: tuple, temporal: bool) -> Tensor:
    """
    X̃ = γ · W_UP(DWConv3D(act(W_DOWN X'))). Without the temporal branch the convolution is skipped and
    only the pointwise nonlinearity sits between the projections.
    """
    hidden = linear(x_prime, params.down_weight, params.down_bias)
    if config.activation == 'gelu' or not temporal:
        hidden = gelu(hidden)

    if temporal:
        B, N, channels = hidden.shape
        volume = depthwise_conv3d(_to_grid(hidden, grid), params.conv_weight, params.conv_bias)
        hidden = volume.reshape(B, N, channels)

    return scale(linear(hidden, params.up_weight, params.up_bias), config.scale)


def adapter_forward(x_hat: Tensor, block: Block, params: AdapterParams, config: AdapterConfig) -> Tensor:
    """
    Parallel spatio-temporal adapter: X = MLP(NL(X̂)) + X̃ + X̂, with NL the block's own pre-MLP norm.
    """
    x_prime = block.norm2(x_hat)
    x_3d = block.mlp(x_prime) + bottleneck(x_prime, params, config, block.config.grid, temporal=True)
    return x_3d + x_hat


def adapter_forward_sequential(x_hat: Tensor, block: Block, params: AdapterParams, config: AdapterConfig) -> Tensor:
    """
    Sequential placement, kept as a comparison arm: the bottleneck reads the MLP's residual output
    instead of running beside it. X = (X̂ + MLP(NL(X̂))) + X̃(NL(X̂ + MLP(NL(X̂)))).
    """
    h = x_hat + block.mlp(block.norm2(x_hat))
    return h + bottleneck(block.norm2(h), params, config, block.config.grid, temporal=config.temporal)


def spatial_adapter_forward(x_hat: Tensor, block: Block, params: AdapterParams, config: AdapterConfig) -> Tensor:
    """
    Parallel bottleneck without the 3D convolution.
    """
    x_prime = block.norm2(x_hat)
    x_3d = block.mlp(x_prime) + bottleneck(x_prime, params, config, block.config.grid, temporal=False)
    return x_3d + x_hat


def prompt_inject(tokens: Tensor, prompts: Optional[Tensor]) -> Tensor:
    """
    Prepends m prompt tokens to every sequence of the batch: (B, N, d) -> (B, m + N, d).
    """
    if prompts is None or prompts.shape[0] == 0:
        return tokens
    B, _, d = tokens.shape
    m = prompts.shape[0]
    return concat([expand(prompts, (B, m, d)), tokens], axis=1)


def strip_prompts(tokens: Tensor, count: int) -> Tensor:
    if count == 0:
        return tokens
    return tokens[:, count:]


class AdapterHook():
    """
    Takes over the MLP half of a block. Parameters are looked up in the block's registry on every call,
    so clones and loaded states are always honoured.
    """

    FORWARDS = {
        'parallel': adapter_forward
        , 'sequential': adapter_forward_sequential
        , 'spatial': spatial_adapter_forward
    }

    def __init__(self, config: AdapterConfig):
        self.config = config
        self.forward = self.FORWARDS[config.variant]

    def params(self, block: Block) -> AdapterParams:
        def get(suffix):
            name = f"{block.prefix}.adapter.{suffix}"
            return block.registry[name] if name in block.registry else None

        return AdapterParams(get('down.weight'), get('down.bias'), get('conv.weight'), get('conv.bias'),
                             get('up.weight'), get('up.bias'))

    def __call__(self, block: Block, x_hat: Tensor) -> Tensor:
        return self.forward(x_hat, block, self.params(block), self.config)


class PromptHook():
    """
    Deep prompting: fresh learnable tokens before each block, their outputs dropped after it.
    """

    def __init__(self, block: Block, count: int):
        self.block = block
        self.count = count

    def inject(self, x: Tensor) -> Tensor:
        return prompt_inject(x, self.block.param('prompt'))

    def strip(self, x: Tensor) -> Tensor:
        return strip_prompts(x, self.count)


def initial_value(suffix: str, shape: tuple, strategy: PeftStrategy, rng: np.random.Generator, dtype) -> np.ndarray:
    if suffix == 'prompt' or suffix == 'adapter.down.weight':
        return trunc_normal(shape, rng, dtype=dtype)
    if suffix == 'adapter.conv.weight':
        return delta_kernel(strategy.adapter.kernel, shape[-1], dtype=dtype)
    return np.zeros(shape, dtype=dtype)


def apply_strategy(model: Backbone, strategy: PeftStrategy, seed: int = 0) -> Backbone:
    """
    Instruments `model` in place and flags its trainable set.

    - full: everything trains.
    - linear_probe: only the head.
    - bias_tune: biases of the linear projections and the head.
    - prompt_tune: m tokens per layer and the head.
    - adapter: one adapter per block and the head; W_UP starts at zero and the depthwise kernel at the
      identity, so the instrumented model starts out computing exactly what the frozen one does.

    Returns:
        - Backbone: The same model, for chaining. Its registry carries the new trainable flags.
    """
    if model.strategy is not None:
        raise StrategyError(f"Model is already instrumented with <{model.strategy.label}>; strategies do not stack.")

    registry = model.registry
    rng = np.random.default_rng([seed, 11])

    for name, shape in strategy.added_shapes(model.config).items():
        suffix = name.split('.', 2)[2]
        registry.register(name, Tensor(initial_value(suffix, shape, strategy, rng, model.dtype)))

    for block in model.blocks:
        if strategy.kind == 'adapter':
            block.adapter = AdapterHook(strategy.adapter)
        elif strategy.kind == 'prompt_tune' and strategy.prompt_tokens:
            block.prompt = PromptHook(block, strategy.prompt_tokens)

    for name in registry.parameters():
        registry.set_trainable(name, strategy.is_trainable(name))

    model.strategy = strategy
    logger.debug(f"Applied <{strategy.label}>: {registry.numel(registry.trainable_names())} trainable parameters.")
    return model
