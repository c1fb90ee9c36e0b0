"""
A small dense-tensor kernel with tape-based reverse-mode differentiation.

Every operation records a node on the innermost active `Tape` whenever at least one of its inputs
requires a gradient. Outside of a tape nothing is recorded, which is how evaluation runs.

    >>> with Tape() as tape:
    ...     loss = softmax_cross_entropy(logits, labels)
    >>> tape.backward(loss)
"""
from scipy.special import erf

from src.core.schemas import ConfigError

from collections import namedtuple
from typing import Callable, List, Optional, Sequence

import numpy as np
import threading
import math


class DimensionError(ValueError):
    """
    Raised when tensor shapes do not agree with what an operation expects.
    """


class GradientError(RuntimeError):
    """
    Raised when backward is requested on something that cannot be differentiated.
    """


class LabelError(ValueError):
    """
    Raised when a class label falls outside [0, C).
    """


Node = namedtuple('Node', ['op', 'inputs', 'output', 'backward'])

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, 'stack'):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional['Tape']:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor():
    """
    A dense n-dimensional array with an optional gradient slot.

    Args:
        - data (array-like): The values. Integer input is promoted to float64.
        - requires_grad (bool, optional): Whether gradients should flow into this tensor. Defaults to False.
        - name (str, optional): A label used in error messages and registries.
        - dtype (np.dtype, optional): Forces the storage type.
    """

    def __init__(self, data, requires_grad: bool = False, name: str = None, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)

        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data, name=self.name)

    def copy(self) -> 'Tensor':
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self):
        label = f", name='{self.name}'" if self.name else ''
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # operators
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(value, like: Tensor = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


class Tape():
    """
    The compute graph of one forward pass: an ordered list of executed nodes.

    Nodes are appended in execution order, so every node's inputs were produced before it. `backward`
    walks the list once, in reverse. A tape is meant for a single forward/backward pair and is not
    reused across batches.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable):
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor):
        """
        Populates `.grad` on every leaf tensor that requires a gradient and is reachable from `loss`.
        Frozen tensors (requires_grad=False) never receive a gradient, but gradients still flow through
        the operations that use them towards trainable tensors further upstream.
        """
        if loss.size != 1:
            raise GradientError(f"Backward needs a scalar loss, got shape {loss.shape}.")
        if not loss.requires_grad:
            raise GradientError("The loss does not depend on any tensor that requires a gradient.")

        produced = {id(node.output) for node in self.nodes}
        grads = {id(loss): np.ones_like(loss.data)}

        for node in reversed(self.nodes):
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue

            input_grads = node.backward(upstream)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue

                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad

                if key not in produced:
                    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
                    grads.pop(key)


def backward(tape: Tape, loss: Tensor):
    tape.backward(loss)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, inputs, out, rule)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise
def _pair(a, b):
    # constants take the dtype of the tensor operand
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make('add', a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make('sub', a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make('mul', a.data * b.data, (a, b), rule)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def rule(g):
        return (g * factor,)

    return _make('scale', x.data * factor, (x,), rule)


def gelu(x: Tensor) -> Tensor:
    """
    Gaussian-error linear unit, exact form x·Φ(x).
    """
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)

    def rule(g):
        return (g * (cdf + x.data * pdf),)

    return _make('gelu', x.data * cdf, (x,), rule)


# shape
def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"Cannot reshape {x.shape} into {tuple(shape)}.")

    def rule(g):
        return (g.reshape(x.shape),)

    return _make('reshape', data, (x,), rule)


def transpose(x: Tensor, axes: tuple) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def rule(g):
        return (g.transpose(inverse),)

    return _make('transpose', x.data.transpose(axes), (x,), rule)


def expand(x: Tensor, shape: tuple) -> Tensor:
    def rule(g):
        return (_unbroadcast(g, x.shape),)

    return _make('expand', np.broadcast_to(x.data, shape).copy(), (x,), rule)


def index(x: Tensor, key) -> Tensor:
    """
    Basic (slice/integer) indexing.
    """
    def rule(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _make('index', np.array(x.data[key]), (x,), rule)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    extents = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(extents)[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make('concat', np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


# reductions
def tensor_sum(x: Tensor, axis=None) -> Tensor:
    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    data = x.data.sum(axis=axis)
    return _make('sum', np.asarray(data, dtype=x.dtype), (x,), rule)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / count, axis), x.shape).copy(),)

    data = x.data.mean(axis=axis)
    return _make('mean', np.asarray(data, dtype=x.dtype), (x,), rule)


# linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes, broadcasting any leading (batch) axes.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}.")

    def rule(g):
        grad_a = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        grad_b = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return grad_a, grad_b

    return _make('matmul', np.matmul(a.data, b.data), (a, b), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add(matmul(x, weight), bias)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make('softmax', y, (x,), rule)


# convolution
def depthwise_conv3d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """
    Per-channel 3D convolution with zero "same" padding.

    Args:
        - x (Tensor): Input of shape (D, H, W, c) or (B, D, H, W, c).
        - kernel (Tensor): Filter of shape (kd, kh, kw, c) with odd extents.
        - bias (Tensor): Per-channel bias of shape (c,).

    Returns:
        - Tensor: Output with the same shape as `x`.
    """
    if kernel.ndim != 4:
        raise DimensionError(f"Kernel must be (kd, kh, kw, c), got {kernel.shape}.")
    if any(extent % 2 == 0 for extent in kernel.shape[:3]):
        raise ConfigError(f"Kernel extents must be odd, got {kernel.shape[:3]}.")
    if x.ndim not in (4, 5) or x.shape[-1] != kernel.shape[-1] or bias.shape != (kernel.shape[-1],):
        raise DimensionError(f"depthwise_conv3d shape mismatch: input {x.shape}, kernel {kernel.shape}, bias {bias.shape}.")

    batched = x.ndim == 5
    xb = x.data if batched else x.data[None]
    kd, kh, kw, _ = kernel.shape
    _, D, H, W, _ = xb.shape
    pad = ((0, 0), (kd // 2, kd // 2), (kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0))
    padded = np.pad(xb, pad)

    taps = [(i, j, k) for i in range(kd) for j in range(kh) for k in range(kw)]
    out = np.zeros_like(xb)
    for i, j, k in taps:
        out += padded[:, i:i + D, j:j + H, k:k + W, :] * kernel.data[i, j, k]
    out += bias.data

    def rule(g):
        gb = g if batched else g[None]
        grad_padded = np.zeros_like(padded)
        grad_kernel = np.zeros_like(kernel.data)
        for i, j, k in taps:
            grad_padded[:, i:i + D, j:j + H, k:k + W, :] += gb * kernel.data[i, j, k]
            grad_kernel[i, j, k] = (gb * padded[:, i:i + D, j:j + H, k:k + W, :]).sum(axis=(0, 1, 2, 3))
        grad_x = grad_padded[:, kd // 2:kd // 2 + D, kh // 2:kh // 2 + H, kw // 2:kw // 2 + W, :]
        grad_bias = gb.sum(axis=(0, 1, 2, 3))
        return (grad_x if batched else grad_x[0]), grad_kernel, grad_bias

    return _make('depthwise_conv3d', out if batched else out[0], (x, kernel, bias), rule)


# normalization
def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm expects gain/bias of shape ({d},), got {gain.shape} and {bias.shape}.")

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def rule(g):
        dxhat = g * gain.data
        grad_x = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return grad_x, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make('layer_norm', xhat * gain.data + bias.data, (x, gain, bias), rule)


class RunningStats():
    """
    Running mean/variance of a BatchNorm layer without affine parameters. `mean` and `var` are the
    registry buffers themselves, updated in place.
    """

    def __init__(self, mean: Tensor, var: Tensor, momentum: float = 0.1, eps: float = 1e-5):
        self.mean = mean
        self.var = var
        self.momentum = momentum
        self.eps = eps


def batch_norm_no_affine(x: Tensor, stats: RunningStats, mode: str = 'train') -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"batch_norm_no_affine expects (B, d), got {x.shape}.")

    if mode == 'eval':
        inv = 1.0 / np.sqrt(stats.var.data + stats.eps)

        def eval_rule(g):
            return (g * inv,)

        return _make('batch_norm', (x.data - stats.mean.data) * inv, (x,), eval_rule)

    if mode != 'train':
        raise ValueError(f"Unknown mode <{mode}>.")

    B = x.shape[0]
    if B < 2:
        raise DimensionError("batch_norm_no_affine needs a batch of at least 2 in train mode.")

    mu = x.data.mean(axis=0)
    centered = x.data - mu
    var = (centered * centered).mean(axis=0)
    inv = 1.0 / np.sqrt(var + stats.eps)
    xhat = centered * inv

    m = stats.momentum
    stats.mean.data[...] = (1.0 - m) * stats.mean.data + m * mu
    stats.var.data[...] = (1.0 - m) * stats.var.data + m * var * (B / (B - 1))

    def rule(g):
        return (inv / B * (B * g - g.sum(axis=0) - xhat * (g * xhat).sum(axis=0)),)

    return _make('batch_norm', xhat, (x,), rule)


# losses
def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"Expected {B} labels, got shape {labels.shape}.")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise LabelError(f"Labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}].")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(B), labels].mean()

    def rule(g):
        grad = np.exp(log_probs)
        grad[np.arange(B), labels] -= 1.0
        return (grad * (g / B),)

    return _make('softmax_cross_entropy', np.asarray(loss, dtype=logits.dtype), (logits,), rule)


def mse_loss(prediction: Tensor, target: Tensor) -> Tensor:
    if prediction.shape != target.shape:
        raise DimensionError(f"mse_loss shape mismatch: {prediction.shape} vs {target.shape}.")

    diff = prediction.data - target.data
    count = diff.size

    def rule(g):
        grad = g * 2.0 * diff / count
        return grad, -grad

    return _make('mse_loss', np.asarray((diff * diff).mean(), dtype=prediction.dtype), (prediction, target), rule)
