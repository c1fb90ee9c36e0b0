from src.core.models import Backbone
from src.core.tensor import Tape, Tensor, softmax_cross_entropy

from typing import Dict, Iterator, List

import numpy as np
import logging

logger = logging.getLogger('root')


class SGD():
    """
    Plain (optionally momentum) SGD over an explicit set of tensors. Only the tensors handed in are ever
    touched, so frozen parameters stay bitwise unchanged.
    """

    def __init__(self, params: Dict[str, Tensor], lr: float, momentum: float = 0.0):
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    @property
    def numel(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()

    def step(self):
        for name, param in self.params.items():
            if param.grad is None:
                continue
            update = param.grad
            if self.momentum:
                buf = self.velocity.get(name)
                buf = update.copy() if buf is None else self.momentum * buf + update
                self.velocity[name] = buf
                update = buf
            param.data = (param.data - self.lr * update).astype(param.dtype)


def minibatches(count: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """
    Yields index batches over a fresh permutation. A trailing batch of one is merged into the batch
    before it, since BatchNorm cannot train on a single sample.
    """
    order = rng.permutation(count)
    bounds = list(range(0, count, batch_size)) + [count]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        bounds.pop(-2)
    for start, stop in zip(bounds[:-1], bounds[1:]):
        yield order[start:stop]


def train_step(model: Backbone, optimizer: SGD, videos: np.ndarray, labels: np.ndarray) -> float:
    mode = 'train' if len(labels) > 1 else 'eval'
    optimizer.zero_grad()
    with Tape() as tape:
        loss = softmax_cross_entropy(model.forward(videos, mode=mode), labels)
    if loss.requires_grad:
        tape.backward(loss)
        optimizer.step()
    return loss.item()


def train_epochs(model: Backbone, videos: np.ndarray, labels: np.ndarray, epochs: int, batch_size: int, lr: float,
                 rng: np.random.Generator, momentum: float = 0.0) -> float:
    """
    Mini-batch SGD on the model's trainable parameters.

    Returns:
        - float: Mean training loss over the last epoch.
    """
    registry = model.registry
    optimizer = SGD({name: registry[name] for name in registry.trainable_names()}, lr=lr, momentum=momentum)

    if len(labels) == 1:
        logger.warning("Training on a single sample; BatchNorm falls back to its running statistics.")

    losses: List[float] = []
    for _ in range(epochs):
        losses = [train_step(model, optimizer, videos[batch], labels[batch])
                  for batch in minibatches(len(labels), batch_size, rng)]
    return float(np.mean(losses)) if losses else 0.0


def predict(model: Backbone, videos: np.ndarray, batch_size: int = 64) -> np.ndarray:
    outputs = [model.forward(videos[start:start + batch_size], mode='eval').data.argmax(axis=1)
               for start in range(0, len(videos), batch_size)]
    return np.concatenate(outputs) if outputs else np.zeros(0, dtype=np.int64)


def evaluate(model: Backbone, videos: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    if len(labels) == 0:
        return 0.0
    return float((predict(model, videos, batch_size) == labels).mean())
