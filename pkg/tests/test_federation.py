from src.core.models import build_backbone, count_parameters
from src.core.optim import train_epochs
from src.core.schemas import PeftStrategy, AdapterConfig
from src.core.tensor import Tape, softmax_cross_entropy
from src.custom.costs import round_cost
from src.custom.datakit import VideoDataset, dirichlet_partition, subset
from src.custom.federation import AggregationError, FederationError, Client, ClientUpdate, make_clients, \
                                  sample_clients, client_update, aggregate, run_federation
from src.custom.peft import apply_strategy

import numpy as np
import pytest

ADAPTER = PeftStrategy(kind='adapter', adapter=AdapterConfig(bottleneck=4))


@pytest.fixture
def adapted(tiny_config):
    return apply_strategy(build_backbone(tiny_config, seed=3, dtype=np.float64), ADAPTER, seed=3)


@pytest.fixture
def clients(tiny_splits, tiny_partition):
    return make_clients(tiny_splits.train, dirichlet_partition(tiny_splits.train.labels, tiny_partition))


def test_full_participation_and_determinism():
    assert sample_clients(16, 16, 0, seed=1) == list(range(16))
    assert sample_clients(16, 4, 3, seed=1) == sample_clients(16, 4, 3, seed=1)
    assert sample_clients(16, 4, 3, seed=1) != sample_clients(16, 4, 4, seed=1)


def test_sampling_is_uniform():
    counts = np.zeros(16)
    for r in range(10000):
        counts[sample_clients(16, 4, r, seed=0)] += 1
    assert np.all(np.abs(counts / 10000 - 0.25) <= 0.02)


@pytest.mark.parametrize('size', [0, 17])
def test_sample_size_out_of_range(size):
    with pytest.raises(ValueError):
        sample_clients(16, size, 0, seed=0)


def test_weighted_mean_hand_example():
    result = aggregate({0: {'w': np.array([1.0])}, 1: {'w': np.array([3.0])}}, {0: 10, 1: 30})
    assert result['w'][0] == 2.5


def test_identical_updates_are_a_fixed_point():
    theta = np.random.default_rng(0).normal(size=(5, 3)).astype(np.float32)
    result = aggregate({k: {'w': theta.copy()} for k in range(3)}, {0: 7, 1: 2, 2: 5})
    assert result['w'].dtype == np.float32
    assert np.array_equal(result['w'], theta)


def test_aggregate_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 6))
        updates = {k: {'a': rng.normal(size=(3, 2)), 'b': rng.normal(size=4)} for k in range(n)}
        sizes = {k: int(rng.integers(1, 50)) for k in range(n)}
        total = sum(sizes.values())
        result = aggregate(updates, sizes)
        for name in ('a', 'b'):
            expected = sum(sizes[k] / total * updates[k][name] for k in range(n))
            assert np.max(np.abs(result[name] - expected)) <= 1e-12


def test_aggregate_is_convex():
    rng = np.random.default_rng(2)
    updates = {k: {'w': rng.normal(size=20)} for k in range(4)}
    result = aggregate(updates, {0: 3, 1: 1, 2: 8, 3: 2})['w']
    stacked = np.stack([u['w'] for u in updates.values()])
    assert np.all(result >= stacked.min(axis=0) - 1e-15)
    assert np.all(result <= stacked.max(axis=0) + 1e-15)


def test_aggregate_ignores_presentation_order():
    rng = np.random.default_rng(3)
    updates = {k: {'w': rng.normal(size=6)} for k in range(5)}
    sizes = {k: k + 1 for k in range(5)}
    reordered = {k: updates[k] for k in (3, 1, 4, 0, 2)}
    assert np.array_equal(aggregate(updates, sizes)['w'], aggregate(reordered, sizes)['w'])


def test_aggregate_rejects_divergent_catalogs():
    with pytest.raises(AggregationError, match='<b>'):
        aggregate({0: {'a': np.zeros(2)}, 1: {'a': np.zeros(2), 'b': np.zeros(1)}}, {0: 1, 1: 1})
    with pytest.raises(AggregationError, match='<a>'):
        aggregate({0: {'a': np.zeros(2)}, 1: {'a': np.zeros(3)}}, {0: 1, 1: 1})
    with pytest.raises(AggregationError):
        aggregate({0: {'a': np.zeros(2)}}, {0: 0})


def test_zero_weight_clients_do_not_count():
    result = aggregate({0: {'w': np.array([1.0])}, 1: {'w': np.array([100.0])}}, {0: 2, 1: 0})
    assert result['w'][0] == 1.0


def test_zero_learning_rate_returns_the_broadcast(adapted, clients, tiny_train):
    config = tiny_train.copy(update={'lr': 0.0})
    registry = adapted.registry
    broadcast = registry.state(registry.transmitted_names())
    update = client_update(clients[0], broadcast, adapted, config, round_index=0)
    for name in registry.trainable_names():
        assert np.array_equal(update.params[name], broadcast[name])


def test_client_update_leaves_the_frozen_model_alone(adapted, clients, tiny_train):
    before = adapted.registry.state()
    client_update(clients[1], adapted.registry.state(adapted.registry.transmitted_names()), adapted, tiny_train, 0)
    after = adapted.registry.state()
    assert all(np.array_equal(before[name], after[name]) for name in before)


def test_empty_client_is_skipped(adapted, tiny_splits, tiny_train, caplog):
    empty = Client(9, subset(tiny_splits.train, []))
    broadcast = adapted.registry.state(adapted.registry.transmitted_names())
    update = client_update(empty, broadcast, adapted, tiny_train, 0)
    assert update.num_samples == 0
    assert 'no data' in caplog.text


def test_broadcast_mismatch_is_rejected(adapted, clients, tiny_train):
    with pytest.raises(AggregationError):
        client_update(clients[0], {'head.bias': np.zeros(4)}, adapted, tiny_train, 0)


def test_one_local_step_matches_a_direct_gradient(adapted, tiny_splits, tiny_train):
    data = subset(tiny_splits.train, range(8))
    client = Client(0, data)
    config = tiny_train.copy(update={'local_epochs': 1, 'batch_size': 8, 'lr': 0.1})
    registry = adapted.registry
    update = client_update(client, registry.state(registry.transmitted_names()), adapted, config, 0)

    oracle = adapted.clone()
    with Tape() as tape:
        loss = softmax_cross_entropy(oracle.forward(data.videos, mode='train'), data.labels)
    tape.backward(loss)
    for name in registry.trainable_names():
        expected = registry[name].data - 0.1 * oracle.registry[name].grad
        assert np.max(np.abs(update.params[name] - expected)) <= 1e-12


def test_updates_carry_no_raw_data(clients):
    assert ClientUpdate._fields == ('client_id', 'params', 'num_samples', 'train_loss')
    assert [key for key in vars(clients[0]) if not key.startswith('_')] == ['client_id']


def test_zero_rounds_changes_nothing(adapted, clients, tiny_splits, tiny_train):
    before = adapted.registry.state()
    history, ledger = run_federation(adapted, clients, tiny_splits.test, tiny_train.copy(update={'rounds': 0}))
    assert history == [] and ledger.cumulative == 0
    assert all(np.array_equal(before[name], value) for name, value in adapted.registry.state().items())


def test_rounds_match_a_hand_unrolled_trace(adapted, tiny_splits, tiny_train):
    partition = [list(range(0, 20)), list(range(20, 64))]
    config = tiny_train.copy(update={'clients': 2, 'clients_per_round': 2, 'rounds': 2})
    clients = make_clients(tiny_splits.train, partition)

    names = adapted.registry.transmitted_names()
    expected = adapted.clone()
    theta = expected.registry.state(names)
    for r in range(2):
        locals_ = {}
        for k, indices in enumerate(partition):
            replica = expected.clone()
            replica.registry.load_state(theta)
            data = subset(tiny_splits.train, indices)
            train_epochs(replica, data.videos, data.labels, config.local_epochs, config.batch_size, config.lr,
                         np.random.default_rng([config.seed, r, k]), momentum=config.momentum)
            locals_[k] = replica.registry.state(names)
        theta = {name: (20 * locals_[0][name] + 44 * locals_[1][name]) / 64 for name in names}

    history, ledger = run_federation(adapted, clients, tiny_splits.test, config)
    result = adapted.registry.state(names)
    for name in names:
        assert np.max(np.abs(result[name] - theta[name])) <= 1e-12

    transmitted = adapted.registry.numel(names)
    assert [report.bytes_uploaded for report in history] == [round_cost(transmitted, 2)] * 2
    assert ledger.cumulative == history[-1].cumulative_bytes == 2 * round_cost(transmitted, 2)


def test_workers_do_not_change_the_result(tiny_config, clients, tiny_splits, tiny_train):
    runs = []
    for workers in (1, 3):
        model = apply_strategy(build_backbone(tiny_config, seed=3), ADAPTER, seed=3)
        history, _ = run_federation(model, clients, tiny_splits.test, tiny_train, workers=workers)
        runs.append((model.registry.state(), history))

    (state_a, history_a), (state_b, history_b) = runs
    assert history_a == history_b
    assert all(np.array_equal(state_a[name], state_b[name]) for name in state_a)


def test_ledger_reports_participants_with_data(adapted, tiny_splits, tiny_train):
    clients = make_clients(tiny_splits.train, [list(range(64)), []])
    config = tiny_train.copy(update={'clients': 2, 'clients_per_round': 2, 'rounds': 1})
    history, _ = run_federation(adapted, clients, tiny_splits.test, config)
    assert history[0].bytes_uploaded == round_cost(history[0].param_count, 1)
    assert list(history[0].client_losses) == [0]


class FlakyClient(Client):

    def __init__(self, client_id: int, dataset: VideoDataset):
        super().__init__(client_id, dataset)
        self.calls = 0

    def train(self, model, config, rng):
        self.calls += 1
        if self.calls > 1:
            raise RuntimeError("connection lost")
        return super().train(model, config, rng)


def test_failed_round_keeps_completed_history(adapted, tiny_splits, tiny_train):
    clients = [FlakyClient(0, subset(tiny_splits.train, range(32))), Client(1, subset(tiny_splits.train, range(32, 64)))]
    config = tiny_train.copy(update={'clients': 2, 'clients_per_round': 2, 'rounds': 3})

    with pytest.raises(FederationError, match='Round 1') as info:
        run_federation(adapted, clients, tiny_splits.test, config)
    assert len(info.value.history) == 1
    assert len(info.value.ledger) == 1


@pytest.mark.parametrize('strategy', [
    PeftStrategy(kind='linear_probe')
    , PeftStrategy(kind='bias_tune')
    , PeftStrategy(kind='prompt_tune', prompt_tokens=2)
    , ADAPTER
    , PeftStrategy(kind='adapter', adapter=AdapterConfig(bottleneck=4, placement='sequential'))
    , PeftStrategy(kind='adapter', adapter=AdapterConfig(bottleneck=4, temporal=False))
], ids=lambda s: s.label)
def test_frozen_parameters_survive_federation(tiny_config, clients, tiny_splits, tiny_train, strategy):
    model = apply_strategy(build_backbone(tiny_config, seed=3), strategy, seed=3)
    registry = model.registry
    frozen = {name: registry[name].data.copy() for name in registry.frozen_names()}

    run_federation(model, clients, tiny_splits.test, tiny_train.copy(update={'rounds': 3}))
    assert all(np.array_equal(registry[name].data, value) for name, value in frozen.items())
    assert registry.numel(registry.trainable_names()) == count_parameters(tiny_config, strategy).trainable
