"""
Experiment runner: configuration loading, the upstream pre-training stage, the federated downstream
stage (standard or through a compressed counselor), metrics emission and run comparison.
"""
from src.core.methods import read_metrics, records_of, last_record, round_columns
from src.core.models import Backbone, build_backbone, count_parameters
from src.core.optim import train_epochs, evaluate
from src.core.schemas import BackboneConfig, PeftStrategy, AdapterConfig, ConfigError, SuccessMessages, RunOutput
from src.core.security import fingerprint
from src.core.store import ArtifactManager, load_checkpoint
from src.custom.costs import CostLedger, format_human, rounds_to_target
from src.custom.datakit import generate_dataset, generate_split, dirichlet_partition
from src.custom.federation import make_clients, run_federation
from src.custom.peft import apply_strategy
from src.custom.privacy import compress_backbone, distill, counselor_train_and_insert
from src.custom.schemas import ExperimentConfig, EXPERIMENT_SCHEMA

from pydantic import ValidationError

from collections import namedtuple
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
import numpy as np
import logging
import yaml

logger = logging.getLogger('root')

# upstream data is drawn from its own seed stream, never the downstream one
UPSTREAM_SEED_OFFSET = 7919
MISSING = '—'

UpstreamResult = namedtuple('UpstreamResult', ['model', 'accuracy', 'path'])
Comparison = namedtuple('Comparison', ['frame', 'text'])

STRATEGIES = {
    'full': PeftStrategy(kind='full')
    , 'linear_probe': PeftStrategy(kind='linear_probe')
    , 'bias_tune': PeftStrategy(kind='bias_tune')
    , 'prompt_tune': PeftStrategy(kind='prompt_tune')
    , 'adapter': PeftStrategy(kind='adapter')
    , 'adapter_sequential': PeftStrategy(kind='adapter', adapter=AdapterConfig(placement='sequential'))
    , 'adapter_spatial': PeftStrategy(kind='adapter', adapter=AdapterConfig(temporal=False))
}


def apply_overrides(document: dict, overrides: Dict[str, object]) -> dict:
    """
    Sets dotted keys (`train.rounds`) on a raw config document; `None` values are ignored.
    """
    document = dict(document)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        *parents, leaf = key.split('.')
        node = document
        for parent in parents:
            node[parent] = dict(node.get(parent) or {})
            node = node[parent]
        node[leaf] = value
    return document


def load_config(path, overrides: Dict[str, object] = None) -> ExperimentConfig:
    """
    Reads a YAML experiment file, applies CLI overrides and validates the result.

    Raises:
        - ConfigError: When the file is not a mapping, its schema header is not `fedpeft/experiment-v1` or a
          section fails validation.
    """
    with open(path, 'r') as f:
        document = yaml.safe_load(f) or {}
    if not isinstance(document, dict):
        raise ConfigError(f"<{path}> does not hold a configuration mapping.")
    if document.get('schema') != EXPERIMENT_SCHEMA:
        raise ConfigError(f"<{path}> declares schema <{document.get('schema')}>, expected <{EXPERIMENT_SCHEMA}>.")

    document = apply_overrides(document, overrides)
    strategy = document.get('strategy')
    if isinstance(strategy, str):
        if strategy not in STRATEGIES:
            raise ConfigError(f"Unknown strategy <{strategy}>; available: {', '.join(STRATEGIES)}.")
        document['strategy'] = STRATEGIES[strategy].dict()
    try:
        return ExperimentConfig.parse_obj(document)
    except ValidationError as e:
        raise ConfigError(f"<{path}> is not a valid experiment:\n{e}") from e


def upstream_backbone(config: ExperimentConfig) -> BackboneConfig:
    return config.backbone.copy(update={'classes': config.upstream.dataset.classes})


def pretrain_upstream(config: ExperimentConfig, artifacts: ArtifactManager = None) -> UpstreamResult:
    """
    Trains the whole backbone centrally on the upstream task and, given an artifact manager, writes
    `upstream.ckpt`.
    """
    upstream = config.upstream
    seed = config.seed + UPSTREAM_SEED_OFFSET
    splits = generate_dataset(upstream.dataset, seed)

    model = apply_strategy(build_backbone(upstream_backbone(config), seed=seed), PeftStrategy(kind='full'))
    logger.info(f"Pre-training upstream on {len(splits.train.labels)} videos for {upstream.epochs} epochs.")
    loss = train_epochs(model, splits.train.videos, splits.train.labels, epochs=upstream.epochs,
                        batch_size=upstream.batch_size, lr=upstream.lr, rng=np.random.default_rng([seed, 5]),
                        momentum=upstream.momentum)
    accuracy = evaluate(model, splits.test.videos, splits.test.labels)
    logger.info(f"Upstream accuracy {accuracy:.4f} (chance {1 / upstream.dataset.classes:.4f}), final loss {loss:.4f}.")

    path = None
    if artifacts is not None:
        path = artifacts.checkpoint(model.registry.state(), 'upstream.ckpt', extensions={
            'upstream': {'classes': upstream.dataset.classes, 'epochs': upstream.epochs, 'accuracy': accuracy}
        })
    return UpstreamResult(model, accuracy, path)


def prepare_backbone(config: ExperimentConfig, artifacts: ArtifactManager = None) -> Backbone:
    """
    The downstream backbone before any strategy: scratch initialization, or the upstream weights with a
    fresh head for the downstream classes.
    """
    model = build_backbone(config.backbone, seed=config.seed)
    if config.init == 'scratch':
        return model

    if config.upstream.checkpoint and Path(config.upstream.checkpoint).exists():
        state, _ = load_checkpoint(config.upstream.checkpoint)
        logger.info(f"Loaded upstream weights from <{config.upstream.checkpoint}>.")
    else:
        state = pretrain_upstream(config, artifacts).model.registry.state()

    model.registry.load_state(state, exclude=('head.',))
    return model


def build_summary(config: ExperimentConfig, history, ledger: CostLedger, model: Backbone) -> dict:
    """
    Run totals. Every figure except the parameter counts and digest can be recomputed from the round
    records.
    """
    registry = model.registry
    accuracies = [report.accuracy for report in history]
    target_round = rounds_to_target(history, config.target_accuracy) if config.target_accuracy is not None else None
    digest_source = config.dict(by_alias=True, exclude={'output_dir'})

    return {
        'type': 'summary'
        , 'label': config.name
        , 'strategy': config.strategy.label
        , 'rounds': len(history)
        , 'clients_per_round': config.train.clients_per_round
        , 'total_bytes': ledger.cumulative
        , 'best_accuracy': max(accuracies) if accuracies else None
        , 'final_accuracy': accuracies[-1] if accuracies else None
        , 'target_accuracy': config.target_accuracy
        , 'rounds_to_target': target_round
        , 'cost_to_target': ledger.cumulative_until(target_round) if target_round is not None else None
        , 'trainable': registry.numel(registry.trainable_names())
        , 'transmitted': registry.numel(registry.transmitted_names(config.train.sync_batchnorm))
        , 'total_parameters': registry.numel(registry.parameters())
        , 'config_digest': fingerprint(digest_source)
    }


def execute(config: ExperimentConfig, artifacts: ArtifactManager, workers: int = 1) -> dict:
    """
    The body of `run_experiment`, without failure handling.
    """
    config = config.resolved()
    artifacts.open_metrics()

    splits = generate_dataset(config.dataset, config.seed)
    partition = dirichlet_partition(splits.train.labels, config.partition)
    clients = make_clients(splits.train, partition)
    model = prepare_backbone(config, artifacts)

    def on_round(report):
        artifacts.write_record({'type': 'round', **report.dict()})

    privacy = config.privacy
    if privacy is not None and privacy.n > 0:
        compressed = compress_backbone(model, privacy.n, privacy.end)
        if privacy.distill_epochs:
            upstream = generate_split(config.upstream.dataset, config.seed + UPSTREAM_SEED_OFFSET, 'train')
            distill(compressed, model, upstream.videos, privacy.distill_epochs, lr=privacy.distill_lr,
                    batch_size=privacy.distill_batch_size, seed=config.seed)
        artifacts.checkpoint(compressed.model.registry.state(), 'counselor.ckpt', extensions=compressed.manifest())

        result = counselor_train_and_insert(compressed, model, config.strategy, clients, splits.test, config.train,
                                            placement=privacy.placement, workers=workers, on_round=on_round)
        history, ledger, counted, final = result.history, result.ledger, result.counselor, result.model
        artifacts.write_record({
            'type': 'insertion'
            , 'accuracy': result.accuracy
            , 'placement': privacy.placement
            , 'positions': result.positions
            , 'dropped': compressed.dropped
            , 'distillation': compressed.provenance
        })
    else:
        apply_strategy(model, config.strategy, seed=config.seed)
        history, ledger = run_federation(model, clients, splits.test, config.train, workers=workers, on_round=on_round)
        counted = final = model

    summary = build_summary(config, history, ledger, counted)
    artifacts.write_record(summary)
    artifacts.checkpoint(final.registry.state(final.registry.transmitted_names(config.train.sync_batchnorm)), 'final.ckpt')
    artifacts.finish('complete')
    return summary


def run_experiment(config: ExperimentConfig, workers: int = 1) -> RunOutput:
    """
    Runs one experiment end to end and writes `metrics.jsonl` under `config.output_dir`: one `round`
    record per round, an `insertion` record on the compressed-model path, a `summary` and a terminal
    `end` marker. A failure flushes what was written, marks the file `failed` and maps to a nonzero
    status.
    """
    artifacts = ArtifactManager(config.output_dir, logger)

    @artifacts.catching(messages=SuccessMessages(f"Run <{config.name}> complete.", f"Run <{config.name}> finished."))
    def stage():
        return execute(config, artifacts, workers)

    return stage()


def pretrain(config: ExperimentConfig) -> RunOutput:
    artifacts = ArtifactManager(config.output_dir, logger)

    @artifacts.catching(messages=SuccessMessages("Upstream checkpoint written."))
    def stage():
        result = pretrain_upstream(config, artifacts)
        return {'accuracy': result.accuracy, 'path': str(result.path)}

    return stage()


def _cell(value, formatter=str):
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return MISSING
    return formatter(value)


def summarize_run(path, target_accuracy: Optional[float] = None) -> dict:
    """
    One comparison row, recomputed from the run's round records.
    """
    frame = read_metrics(path)
    summary = last_record(frame, 'summary')
    insertion = last_record(frame, 'insertion')
    end = last_record(frame, 'end')
    rounds = round_columns(frame, ['round', 'accuracy', 'cumulative_bytes'])

    target = target_accuracy if target_accuracy is not None else summary.get('target_accuracy')
    if target is not None and isinstance(target, float) and np.isnan(target):
        target = None

    hit = None
    if target is not None and len(rounds):
        reached = rounds[rounds['accuracy'] >= target]
        hit = reached.iloc[0] if len(reached) else None

    final = insertion.get('accuracy', rounds['accuracy'].iloc[-1] if len(rounds) else None)
    trainable = summary.get('trainable')

    return {
        'Run': summary.get('label', Path(path).stem)
        , 'Strategy': summary.get('strategy', MISSING)
        , 'Trainable (M)': _cell(trainable, lambda v: f"{int(v) / 1e6:.4f}")
        , 'Rounds': _cell(None if hit is None else int(hit['round']) + 1)
        , 'Cost (transmitted)': _cell(None if hit is None else int(hit['cumulative_bytes']), format_human)
        , 'Total cost': _cell(int(rounds['cumulative_bytes'].iloc[-1]) if len(rounds) else None, format_human)
        , 'Final acc (%)': _cell(final, lambda v: f"{100 * float(v):.2f}")
        , 'Best acc (%)': _cell(rounds['accuracy'].max() if len(rounds) else None, lambda v: f"{100 * float(v):.2f}")
        , 'Status': end.get('status', 'incomplete')
    }


def compare_runs(paths: Sequence, csv_path=None, target_accuracy: Optional[float] = None) -> Comparison:
    """
    A table with one row per run: trainable parameters in millions, rounds to the target accuracy (1-based
    round count, "—" when it is never reached), upload cost up to that round and for the whole run, and
    final and best accuracy.

    Returns:
        - Comparison: The table as a DataFrame and as text. With `csv_path` the table is also written as CSV.
    """
    frame = pd.DataFrame([summarize_run(path, target_accuracy) for path in paths])
    if csv_path is not None:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(csv_path, index=False)
    return Comparison(frame, frame.to_string(index=False))


def count_table(backbone: BackboneConfig, strategies: Dict[str, PeftStrategy] = None, clients_per_round: int = 16,
                rounds: int = 1, sync_batchnorm: bool = True) -> pd.DataFrame:
    """
    Parameter and upload-cost accounting per strategy, in closed form; nothing is allocated. `Trainable (M)`
    counts what the optimizer updates; `Cost (transmitted)` prices what each client uploads, which also
    carries the predictor's BatchNorm running statistics when `sync_batchnorm` is set.
    """
    ledger_rows = []
    for name, strategy in (strategies or STRATEGIES).items():
        counts = count_parameters(backbone, strategy, sync_batchnorm=sync_batchnorm)
        ledger = CostLedger()
        for r in range(rounds):
            ledger.record(r, counts.transmitted, clients_per_round)
        ledger_rows.append({
            'Strategy': name
            , 'Total': counts.total
            , 'Trainable': counts.trainable
            , 'Transmitted': counts.transmitted
            , 'Trainable (M)': f"{counts.trainable / 1e6:.2f}"
            , 'Cost (transmitted)': format_human(ledger.cumulative)
            , 'Bytes': ledger.cumulative
        })
    return pd.DataFrame(ledger_rows)
