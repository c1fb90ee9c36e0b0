"""
Server-side model privacy. The server never hands out its full backbone: clients get a compressed copy
with n blocks dropped (optionally distilled back towards the full model's features), train adapters on
it, and the server inserts the trained adapters into its own full model.
"""
from src.core.models import Backbone, ParameterRegistry
from src.core.optim import SGD, minibatches, evaluate
from src.core.schemas import ConfigError, PeftStrategy, TrainConfig, block_prefix
from src.core.tensor import Tape, Tensor, DimensionError, mse_loss
from src.custom.federation import Client, run_federation
from src.custom.datakit import VideoDataset
from src.custom.peft import StrategyError, apply_strategy

from collections import namedtuple
from typing import Dict, List, Literal, Sequence

import numpy as np
import logging
import re

logger = logging.getLogger('root')

BLOCK_NAME = re.compile(r'^blocks\.(\d+)\.(.+)$')


class CompressedBackbone():
    """
    The adapter counselor Θ^c handed to clients.

    Attributes:
        - model (Backbone): The retained blocks, renumbered from 0, plus embeddings, final norm and head.
        - retained (List[int]): Original depth of each kept block, in order.
        - dropped (List[int]): Original depth of each removed block.
        - end (str): `first` or `last`, the end blocks were dropped from.
        - provenance (dict): Distillation metadata (epochs, initial and final feature MSE).
    """

    def __init__(self, model: Backbone, retained: List[int], dropped: List[int], end: str, provenance: dict = None):
        self.model = model
        self.retained = list(retained)
        self.dropped = list(dropped)
        self.end = end
        self.provenance = provenance or {'distill_epochs': 0}

    @property
    def layers(self) -> int:
        return len(self.retained)

    def manifest(self) -> dict:
        """
        The `dropped_layers` checkpoint extension.
        """
        return {
            'dropped_layers': {
                'end': self.end
                , 'dropped': self.dropped
                , 'retained': self.retained
                , 'provenance': self.provenance
            }
        }


PrivacyResult = namedtuple('PrivacyResult', ['model', 'counselor', 'history', 'ledger', 'accuracy', 'positions'])


def compress_backbone(model: Backbone, n: int, end: Literal['first'] | Literal['last'] = 'last') -> CompressedBackbone:
    """
    Drops n transformer blocks from one end of an uninstrumented backbone. Every kept tensor is copied
    verbatim; kept blocks are renumbered contiguously from 0.

    Raises:
        - ConfigError: When n is outside [1, l).
        - StrategyError: When the model already carries a fine-tuning strategy.
    """
    layers = model.config.layers
    if not 1 <= n < layers:
        raise ConfigError(f"Can drop between 1 and {layers - 1} of {layers} blocks, got {n}.")
    if end not in ('first', 'last'):
        raise ConfigError(f"Unknown drop end <{end}>.")
    if model.strategy is not None:
        raise StrategyError("Compress the frozen backbone before a strategy is applied.")

    retained = list(range(layers - n)) if end == 'last' else list(range(n, layers))
    dropped = [i for i in range(layers) if i not in retained]
    renumber = {old: new for new, old in enumerate(retained)}

    config = model.config.copy(update={'layers': layers - n})
    registry = ParameterRegistry()
    for entry in model.registry:
        source = model.registry[entry.name]
        match = BLOCK_NAME.match(entry.name)
        if match is None:
            name = entry.name
        elif int(match.group(1)) in renumber:
            name = f"{block_prefix(renumber[int(match.group(1))])}.{match.group(2)}"
        else:
            continue
        registry.register(name, Tensor(source.data.copy()), kind=entry.kind)

    logger.info(f"Compressed backbone: dropped blocks {dropped} from the {end} end, "
                f"{registry.numel()} of {model.registry.numel()} parameters kept.")
    return CompressedBackbone(Backbone(config, registry, dtype=model.dtype), retained, dropped, end)


def distillation_loss(student: Backbone, teacher: Backbone, videos: np.ndarray, batch_size: int = 32) -> float:
    """
    Sample-weighted feature MSE between student and teacher over `videos`, without recording a graph.
    """
    if len(videos) == 0:
        return 0.0
    total = 0.0
    for start in range(0, len(videos), batch_size):
        batch = videos[start:start + batch_size]
        loss = mse_loss(student.features(batch), teacher.features(batch))
        total += loss.item() * len(batch)
    return total / len(videos)


def distill(compressed: CompressedBackbone, teacher: Backbone, videos: np.ndarray, epochs: int, lr: float = 0.01,
            batch_size: int = 16, seed: int = 0, momentum: float = 0.9) -> CompressedBackbone:
    """
    Pulls the counselor's pooled pre-head features towards the full model's under mean-squared error, on
    upstream videos. The teacher stays frozen and the counselor's head takes no part.

    Returns:
        - CompressedBackbone: The same object with updated weights and its provenance filled in.
    """
    student = compressed.model
    if student.config.dim != teacher.config.dim or student.config.grid != teacher.config.grid:
        raise DimensionError("Counselor and server model must share width and token grid.")

    registry = student.registry
    names = [name for name in registry.parameters() if not name.startswith('head.')]
    flags = {name: registry[name].requires_grad for name in registry.parameters()}
    for name in names:
        registry.set_trainable(name, True)

    optimizer = SGD({name: registry[name] for name in names}, lr=lr, momentum=momentum)
    rng = np.random.default_rng([seed, 13])
    initial = distillation_loss(student, teacher, videos)

    for epoch in range(epochs):
        losses = []
        for batch in minibatches(len(videos), batch_size, rng):
            target = Tensor(teacher.features(videos[batch]).data)
            optimizer.zero_grad()
            with Tape() as tape:
                loss = mse_loss(student.features(videos[batch]), target)
            if loss.requires_grad:
                tape.backward(loss)
                optimizer.step()
            losses.append(loss.item())
        logger.debug(f"Distillation epoch {epoch}: mean batch MSE {np.mean(losses) if losses else 0.0:.6f}.")

    for name, flag in flags.items():
        registry.set_trainable(name, flag)

    final = distillation_loss(student, teacher, videos)
    compressed.provenance = {'distill_epochs': epochs, 'initial_loss': initial, 'final_loss': final}
    logger.info(f"Distilled counselor over {epochs} epochs: feature MSE {initial:.6f} -> {final:.6f}.")
    return compressed


def insertion_positions(compressed: CompressedBackbone, layers: int, placement: str) -> List[int]:
    """
    Full-model block receiving each counselor block's adapter. `matching` returns every adapter to the
    depth its block came from; `last` stacks them onto the final l - n blocks.
    """
    if placement == 'matching':
        return list(compressed.retained)
    if placement == 'last':
        return list(range(layers - compressed.layers, layers))
    raise ConfigError(f"Unknown adapter placement <{placement}>.")


def insert_adapters(server: Backbone, counselor: Backbone, strategy: PeftStrategy, positions: Sequence[int],
                    seed: int = 0) -> Backbone:
    """
    Returns an instrumented copy of `server` carrying the counselor's trained adapters at `positions`
    and its trained predictor. Blocks without an inserted adapter keep a freshly initialized one, which
    leaves them computing what the frozen block does.
    """
    if counselor.config.dim != server.config.dim or counselor.config.heads != server.config.heads:
        raise DimensionError(f"Counselor blocks (d={counselor.config.dim}) do not fit server blocks (d={server.config.dim}).")
    if len(positions) != counselor.config.layers or any(not 0 <= p < server.config.layers for p in positions):
        raise DimensionError(f"Cannot place {counselor.config.layers} adapters at positions {list(positions)} of "
                             f"a {server.config.layers}-block model.")

    adapted = apply_strategy(server.clone(), strategy, seed=seed)
    state: Dict[str, np.ndarray] = {}
    for name, value in counselor.registry.state().items():
        match = BLOCK_NAME.match(name)
        if match and match.group(2).startswith('adapter.'):
            state[f"{block_prefix(positions[int(match.group(1))])}.{match.group(2)}"] = value
        elif name.startswith('head.') or name.startswith('fc_norm.'):
            state[name] = value

    adapted.registry.load_state(state)
    return adapted


def counselor_train_and_insert(compressed: CompressedBackbone, server: Backbone, strategy: PeftStrategy,
                               clients: Sequence[Client], test_set: VideoDataset, config: TrainConfig,
                               placement: str = 'matching', workers: int = 1, on_round=None) -> PrivacyResult:
    """
    Federated adapter training on the counselor, then insertion into the full server model.

    Clients only ever receive the counselor replica; the server's full backbone stays on this side.

    Returns:
        - PrivacyResult: The adapted full model, the trained counselor, the round history, the ledger,
          the adapted full model's test accuracy and the insertion positions.
    """
    if strategy.kind != 'adapter':
        raise StrategyError(f"Counselor training inserts adapters; got strategy <{strategy.label}>.")
    if compressed.layers + len(compressed.dropped) != server.config.layers:
        raise DimensionError(f"Counselor was cut from a {compressed.layers + len(compressed.dropped)}-block model, "
                             f"server has {server.config.layers}.")

    positions = insertion_positions(compressed, server.config.layers, placement)
    counselor = apply_strategy(compressed.model.clone(), strategy, seed=config.seed)
    history, ledger = run_federation(counselor, clients, test_set, config, workers=workers, on_round=on_round)

    adapted = insert_adapters(server, counselor, strategy, positions, seed=config.seed)
    accuracy = evaluate(adapted, test_set.videos, test_set.labels, config.eval_batch_size)
    logger.info(f"Inserted {len(positions)} adapters at blocks {positions}; server accuracy {accuracy:.4f}.")
    return PrivacyResult(adapted, counselor, history, ledger, accuracy, positions)
