"""
Finite-difference checks for every differentiable operation and for whole adapted blocks. Each case
builds float64 leaf tensors, projects the output onto a fixed random direction to get a scalar, and
compares the taped gradient against central differences.
"""
from src.core.models import build_backbone
from src.core.schemas import BackboneConfig, PeftStrategy, AdapterConfig
from src.core import tensor as T
from src.custom.peft import apply_strategy

from collections import namedtuple
from typing import Callable, List, Sequence

import numpy as np
import pandas as pd

STEP = 1e-6
TOLERANCE = 1e-5

GradCase = namedtuple('GradCase', ['name', 'build'])
GradResult = namedtuple('GradResult', ['name', 'shapes', 'max_error', 'passed'])


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numerical_gradient(fn: Callable[[], T.Tensor], leaf: T.Tensor, direction: np.ndarray, step: float = STEP) -> np.ndarray:
    """
    Central differences of <fn(), direction> with respect to every element of `leaf`, perturbed in place.
    """
    grad = np.zeros_like(leaf.data)
    for idx in np.ndindex(*leaf.shape):
        original = leaf.data[idx]
        leaf.data[idx] = original + step
        plus = float((fn().data * direction).sum())
        leaf.data[idx] = original - step
        minus = float((fn().data * direction).sum())
        leaf.data[idx] = original
        grad[idx] = (plus - minus) / (2.0 * step)
    return grad


def check_case(fn: Callable[[], T.Tensor], leaves: Sequence[T.Tensor], rng: np.random.Generator,
               step: float = STEP) -> float:
    """
    Returns:
        - float: The largest relative error over all leaves.
    """
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.zero_grad()

    direction = rng.normal(size=fn().shape)
    with T.Tape() as tape:
        loss = T.tensor_sum(T.mul(fn(), T.Tensor(direction)))
    tape.backward(loss)

    errors = []
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        errors.append(relative_error(analytic, numerical_gradient(fn, leaf, direction, step)))
    return max(errors)


def _leaf(rng, *shape) -> T.Tensor:
    return T.Tensor(rng.normal(size=shape))


def _positive(rng, *shape) -> T.Tensor:
    return T.Tensor(rng.uniform(0.5, 1.5, size=shape))


def _dims(rng, count: int, low: int = 1, high: int = 4) -> tuple:
    return tuple(int(d) for d in rng.integers(low, high + 1, size=count))


def _binary(op, shapes):
    """
    `shapes(rng)` draws the two operand shapes, so every seed checks the op at a different size.
    """
    def build(rng):
        shape_a, shape_b = shapes(rng)
        a, b = _leaf(rng, *shape_a), _leaf(rng, *shape_b)
        return (lambda: op(a, b)), [a, b]
    return build


def _unary(op, shape):
    def build(rng):
        x = _leaf(rng, *shape(rng))
        return (lambda: op(x)), [x]
    return build


def _broadcast_trailing(rng):
    s = _dims(rng, 2)
    return s, s[1:]


def _broadcast_middle(rng):
    s = _dims(rng, 3)
    return s, (1, s[1], 1)


def _broadcast_column(rng):
    s = _dims(rng, 2)
    return s, (s[0], 1)


def _same(rng):
    s = _dims(rng, 2)
    return s, s


def _matmul_shapes(rng):
    m, k, n = _dims(rng, 3)
    return (m, k), (k, n)


def _batched_matmul_shapes(rng):
    b, m, k, n = _dims(rng, 4)
    return (b, m, k), (b, k, n)


def _concat_shapes(rng):
    rows, left, right = _dims(rng, 3)
    return (rows, left), (rows, right)


def _reshape(rng):
    rows, cols = _dims(rng, 2)
    x = _leaf(rng, rows, cols)
    return (lambda: T.reshape(x, (cols, rows))), [x]


def _transpose(rng):
    x = _leaf(rng, *_dims(rng, 3))
    axes = tuple(int(a) for a in rng.permutation(3))
    return (lambda: T.transpose(x, axes)), [x]


def _expand(rng):
    shape = _dims(rng, 2)
    x = _leaf(rng, *shape)
    target = (int(rng.integers(1, 4)),) + shape
    return (lambda: T.expand(x, target)), [x]


def _index(rng):
    rows, cols = int(rng.integers(1, 5)), int(rng.integers(3, 7))
    x = _leaf(rng, rows, cols)
    key = (slice(None), slice(1, cols - 1))
    return (lambda: T.index(x, key)), [x]


def _softmax(rng):
    x = _leaf(rng, *_dims(rng, 1), int(rng.integers(2, 7)))
    return (lambda: T.softmax(x, axis=-1)), [x]


def _linear(rng):
    batch, tokens, fan_in, fan_out = _dims(rng, 4)
    x, w, b = _leaf(rng, batch, tokens, fan_in), _leaf(rng, fan_in, fan_out), _leaf(rng, fan_out)
    return (lambda: T.linear(x, w, b)), [x, w, b]


def _conv(batched: bool, kernel: tuple):
    def build(rng):
        shape = _dims(rng, 5 if batched else 4, high=3)
        x = _leaf(rng, *shape)
        k, b = _leaf(rng, *kernel, shape[-1]), _leaf(rng, shape[-1])
        return (lambda: T.depthwise_conv3d(x, k, b)), [x, k, b]
    return build


def _layer_norm(rng):
    width = int(rng.integers(3, 8))
    x, gain, bias = _leaf(rng, *_dims(rng, 2), width), _leaf(rng, width), _leaf(rng, width)
    return (lambda: T.layer_norm(x, gain, bias)), [x, gain, bias]


def _batch_norm(mode: str):
    def build(rng):
        rows, channels = int(rng.integers(4, 9)), int(rng.integers(1, 6))
        x = _leaf(rng, rows, channels)
        stats = T.RunningStats(_leaf(rng, channels), _positive(rng, channels))
        return (lambda: T.batch_norm_no_affine(x, stats, mode=mode)), [x]
    return build


def _cross_entropy(rng):
    rows, classes = int(rng.integers(1, 7)), int(rng.integers(2, 6))
    logits = _leaf(rng, rows, classes)
    labels = rng.integers(0, classes, size=rows)
    return (lambda: T.softmax_cross_entropy(logits, labels)), [logits]


def _adapted_block(strategy: PeftStrategy):
    """
    One block of a tiny float64 backbone whose clip length and frame size are drawn per seed. Adapter
    up-projections are re-drawn away from zero so every branch carries gradient.
    """
    def build(rng):
        side = int(rng.choice([4, 6]))
        config = BackboneConfig(layers=1, dim=8, heads=int(rng.choice([1, 2])), mlp_ratio=2.0,
                                frames=int(rng.choice([2, 4])), frame_size=(side, side), channels=1,
                                patch=2, tubelet=2, classes=3)
        model = apply_strategy(build_backbone(config, seed=int(rng.integers(1 << 31)), dtype=np.float64), strategy)
        registry = model.registry
        for name in registry.parameters():
            if name.startswith('blocks.00.') and not name.endswith('conv.weight'):
                registry[name].data = rng.normal(scale=0.3, size=registry[name].shape)
        block = model.blocks[0]
        x = _leaf(rng, 2, config.num_tokens, config.dim)
        leaves = [x] + [registry[name] for name in registry.parameters() if name.startswith('blocks.00.')]
        return (lambda: block(x)), leaves
    return build


CASES: List[GradCase] = [
    GradCase('add_broadcast', _binary(T.add, _broadcast_trailing))
    , GradCase('sub_broadcast', _binary(T.sub, _broadcast_middle))
    , GradCase('mul_broadcast', _binary(T.mul, _broadcast_column))
    , GradCase('scale', _unary(lambda x: T.scale(x, 2.5), lambda rng: _dims(rng, 1, high=6)))
    , GradCase('gelu', _unary(T.gelu, lambda rng: _dims(rng, 2)))
    , GradCase('reshape', _reshape)
    , GradCase('transpose', _transpose)
    , GradCase('expand', _expand)
    , GradCase('index', _index)
    , GradCase('concat', _binary(lambda a, b: T.concat([a, b], axis=1), _concat_shapes))
    , GradCase('sum', _unary(lambda x: T.tensor_sum(x, axis=0), lambda rng: _dims(rng, 2)))
    , GradCase('mean', _unary(lambda x: T.mean(x, axis=1), lambda rng: _dims(rng, 2)))
    , GradCase('matmul', _binary(T.matmul, _matmul_shapes))
    , GradCase('matmul_batched', _binary(T.matmul, _batched_matmul_shapes))
    , GradCase('linear', _linear)
    , GradCase('softmax', _softmax)
    , GradCase('depthwise_conv3d', _conv(True, (3, 3, 3)))
    , GradCase('depthwise_conv3d_unbatched', _conv(False, (3, 1, 3)))
    , GradCase('layer_norm', _layer_norm)
    , GradCase('batch_norm_train', _batch_norm('train'))
    , GradCase('batch_norm_eval', _batch_norm('eval'))
    , GradCase('softmax_cross_entropy', _cross_entropy)
    , GradCase('mse_loss', _binary(T.mse_loss, _same))
    , GradCase('block_frozen', _adapted_block(PeftStrategy(kind='full')))
    , GradCase('block_adapter_parallel', _adapted_block(PeftStrategy(kind='adapter', adapter=AdapterConfig(bottleneck=4))))
    , GradCase('block_adapter_sequential', _adapted_block(PeftStrategy(
        kind='adapter', adapter=AdapterConfig(bottleneck=4, placement='sequential'))))
    , GradCase('block_adapter_spatial', _adapted_block(PeftStrategy(
        kind='adapter', adapter=AdapterConfig(bottleneck=4, temporal=False))))
    , GradCase('block_prompt', _adapted_block(PeftStrategy(kind='prompt_tune', prompt_tokens=2)))
]


def run_case(case: GradCase, seed: int = 0, position: int = 0) -> GradResult:
    rng = np.random.default_rng([seed, position])
    fn, leaves = case.build(rng)
    shapes = [tuple(leaf.shape) for leaf in leaves]
    error = check_case(fn, leaves, rng)
    return GradResult(case.name, shapes, error, error <= TOLERANCE)


def run_suite(seed: int = 0, names: Sequence[str] = None) -> pd.DataFrame:
    """
    Runs every case (or the named ones).

    Returns:
        - pd.DataFrame: One row per case with its leaf shapes, worst relative error and verdict.
    """
    rows = [run_case(case, seed, position)._asdict() for position, case in enumerate(CASES)
            if names is None or case.name in names]
    frame = pd.DataFrame(rows, columns=GradResult._fields)
    frame['shapes'] = frame['shapes'].map(lambda shapes: ' '.join('x'.join(map(str, s)) for s in shapes))
    return frame
