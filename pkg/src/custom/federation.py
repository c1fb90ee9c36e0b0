"""
FedAvg over the trainable subset θ: sample clients, broadcast θ^(r), train locally, aggregate by
dataset-size-weighted mean.
"""
from src.core.models import Backbone
from src.core.optim import train_epochs, evaluate
from src.core.schemas import TrainConfig, RoundReport
from src.custom.costs import CostLedger
from src.custom.datakit import VideoDataset, subset

from concurrent.futures import ThreadPoolExecutor
from collections import namedtuple
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import logging

logger = logging.getLogger('root')


class AggregationError(ValueError):
    pass


class FederationError(RuntimeError):
    """
    A round failed. `history` and `ledger` hold everything completed before it.
    """

    def __init__(self, message: str, history: List[RoundReport], ledger: CostLedger):
        super().__init__(message)
        self.history = history
        self.ledger = ledger


# What a client hands back to the server: parameters and a sample count, nothing else.
ClientUpdate = namedtuple('ClientUpdate', ['client_id', 'params', 'num_samples', 'train_loss'])
FederationResult = namedtuple('FederationResult', ['history', 'ledger'])


class Client():
    """
    A participant holding its local dataset T_k. The data is private to the object; the only way to use
    it is `train`, which returns updated parameters.
    """

    def __init__(self, client_id: int, dataset: VideoDataset):
        self.client_id = client_id
        self.__data = dataset

    @property
    def num_samples(self) -> int:
        return len(self.__data.labels)

    def train(self, model: Backbone, config: TrainConfig, rng: np.random.Generator) -> float:
        return train_epochs(model, self.__data.videos, self.__data.labels, epochs=config.local_epochs,
                            batch_size=config.batch_size, lr=config.lr, rng=rng, momentum=config.momentum)


def make_clients(dataset: VideoDataset, partition: Sequence[Sequence[int]]) -> List[Client]:
    return [Client(k, subset(dataset, indices)) for k, indices in enumerate(partition)]


def sample_clients(num_clients: int, size: int, round_index: int, seed: int) -> List[int]:
    """
    Uniform sample without replacement, deterministic in (seed, round), sorted by client id.
    """
    if not 1 <= size <= num_clients:
        raise ValueError(f"Cannot sample {size} of {num_clients} clients.")
    rng = np.random.default_rng([seed, round_index])
    return sorted(int(k) for k in rng.choice(num_clients, size=size, replace=False))


def client_update(client: Client, server_params: Dict[str, np.ndarray], frozen_model: Backbone, config: TrainConfig,
                  round_index: int) -> ClientUpdate:
    """
    Runs E local epochs of mini-batch SGD starting from θ^(r) on a private replica of the frozen model.

    Returns:
        - ClientUpdate: θ_k^(r+1) (plus synced buffers) and |T_k|. An empty client returns θ^(r) with
          zero weight.
    """
    if client.num_samples == 0:
        logger.warning(f"Client {client.client_id} has no data; it is skipped with weight 0.")
        return ClientUpdate(client.client_id, {k: v.copy() for k, v in server_params.items()}, 0, float('nan'))

    replica = frozen_model.clone()
    expected = set(replica.registry.transmitted_names(config.sync_batchnorm))
    if set(server_params) != expected:
        missing = sorted(expected.symmetric_difference(server_params))
        raise AggregationError(f"Broadcast does not match the client's trainable set; first divergent entry <{missing[0]}>.")

    replica.registry.load_state(server_params)
    rng = np.random.default_rng([config.seed, round_index, client.client_id])
    loss = client.train(replica, config, rng)

    return ClientUpdate(client.client_id, replica.registry.state(sorted(server_params)), client.num_samples, loss)


def aggregate(updates: Dict[int, Dict[str, np.ndarray]], sizes: Dict[int, int]) -> Dict[str, np.ndarray]:
    """
    θ^(r+1) = Σ_k (|T_k| / Σ_i |T_i|) θ_k, per parameter. Clients are visited in ascending id order and
    accumulation runs in float64, so the result does not depend on how updates were presented.
    """
    participants = sorted(k for k in updates if sizes.get(k, 0) > 0)
    total = sum(sizes[k] for k in participants)
    if not participants or total <= 0:
        raise AggregationError("No participant contributed any samples.")

    reference = updates[participants[0]]
    catalog = {name: np.shape(value) for name, value in reference.items()}
    for k in participants:
        for name in sorted(set(catalog) | set(updates[k])):
            if name not in catalog or name not in updates[k] or np.shape(updates[k][name]) != catalog[name]:
                raise AggregationError(f"Client {k} diverges from the catalog at parameter <{name}>.")

    result = {}
    for name in sorted(catalog):
        acc = np.zeros(catalog[name], dtype=np.float64)
        for k in participants:
            acc += (sizes[k] / total) * np.asarray(updates[k][name], dtype=np.float64)
        result[name] = acc.astype(np.asarray(reference[name]).dtype)
    return result


def run_federation(model: Backbone, clients: Sequence[Client], test_set: VideoDataset, config: TrainConfig,
                   workers: int = 1, on_round: Callable[[RoundReport], None] = None) -> FederationResult:
    """
    The round loop: sample S_r, broadcast θ^(r), collect client updates (optionally on a thread pool),
    aggregate, load θ^(r+1) into `model`, evaluate on the test split and record the upload cost.

    Raises:
        - FederationError: When a round fails; completed rounds stay available on the exception.
    """
    registry = model.registry
    transmitted = registry.transmitted_names(config.sync_batchnorm)
    param_count = registry.numel(transmitted)
    trainable_count = registry.numel(registry.trainable_names())
    ledger = CostLedger(count_download=config.count_download)
    history: List[RoundReport] = []
    frozen = model.clone()

    for r in range(config.rounds):
        try:
            sampled = sample_clients(len(clients), config.clients_per_round, r, config.seed)
            broadcast = registry.state(transmitted)

            def work(k):
                return client_update(clients[k], broadcast, frozen, config, r)

            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(work, sampled))
            else:
                results = [work(k) for k in sampled]

            updates = {u.client_id: u.params for u in results}
            sizes = {u.client_id: u.num_samples for u in results}
            registry.load_state(aggregate(updates, sizes))

            accuracy = evaluate(model, test_set.videos, test_set.labels, config.eval_batch_size)
            uploaded = sum(1 for u in results if u.num_samples > 0)
            entry = ledger.record(r, param_count, uploaded)
        except Exception as e:
            raise FederationError(f"Round {r} failed: {e}", history, ledger) from e

        report = RoundReport(
            round=r
            , sampled=sampled
            , client_losses={u.client_id: u.train_loss for u in results if u.num_samples > 0}
            , accuracy=accuracy
            , param_count=param_count
            , bytes_uploaded=entry.bytes
            , cumulative_bytes=ledger.cumulative
        )
        history.append(report)
        logger.info(f"Round {r}: accuracy {accuracy:.4f}, {trainable_count} trainable, uploaded {entry.bytes} bytes.")
        if on_round:
            on_round(report)

    return FederationResult(history, ledger)
