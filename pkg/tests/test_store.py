from src.core.schemas import SuccessMessages, TrainConfig, ConfigError
from src.core.store import STATUS_MAP, ArtifactManager, CheckpointError, lookup_error, \
                           save_checkpoint, load_checkpoint

from pydantic import ValidationError

import numpy as np
import logging
import pytest
import json

logger = logging.getLogger('root')


@pytest.fixture
def random_state() -> dict:
    rng = np.random.default_rng(17)
    return {
        'blocks.00.attn.qkv.weight': rng.normal(size=(6, 18)).astype(np.float32)
        , 'blocks.00.adapter.conv.weight': rng.normal(size=(3, 3, 3, 4)).astype(np.float32)
        , 'head.bias': rng.normal(size=(5,)).astype(np.float32)
        , 'fc_norm.running_var': rng.uniform(0.5, 1.5, size=(5,)).astype(np.float32)
    }


def test_checkpoint_round_trip_is_bitwise(tmp_path, random_state):
    path = save_checkpoint(random_state, tmp_path / 'state.ckpt', extensions={'round': 3})
    state, manifest = load_checkpoint(path)

    assert state.keys() == random_state.keys()
    for name, value in random_state.items():
        assert state[name].dtype == np.float32
        assert state[name].shape == np.shape(value)
        assert state[name].tobytes() == np.asarray(value).tobytes()
    assert manifest['extensions'] == {'round': 3}
    assert [entry['name'] for entry in manifest['entries']] == sorted(random_state)


def test_tampered_payload_fails_the_digest(tmp_path, random_state):
    path = save_checkpoint(random_state, tmp_path / 'state.ckpt')
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))

    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_payload_and_foreign_files_are_rejected(tmp_path, random_state):
    path = save_checkpoint(random_state, tmp_path / 'state.ckpt')
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)

    foreign = tmp_path / 'foreign.ckpt'
    foreign.write_bytes(b'PK\x03\x04' + bytes(32))
    with pytest.raises(CheckpointError):
        load_checkpoint(foreign)


def test_only_configuration_failures_map_to_status_one():
    assert lookup_error(ConfigError("bad section")).status_code == STATUS_MAP[1]
    assert lookup_error(FileNotFoundError("missing.yaml")).status_code == STATUS_MAP[1]
    assert lookup_error(CheckpointError("bad digest")).status_code == STATUS_MAP[2]
    assert lookup_error(RuntimeError("diverged")).status_code == STATUS_MAP[2]

    with pytest.raises(ValidationError) as info:
        TrainConfig(rounds=-1)
    assert lookup_error(info.value).status_code == STATUS_MAP[2]


def test_validation_failure_inside_a_stage_is_a_runtime_failure(tmp_path):
    artifacts = ArtifactManager(tmp_path, logger)
    artifacts.open_metrics()

    @artifacts.catching(messages=SuccessMessages('Done.'))
    def stage():
        return TrainConfig(lr=-1.0)

    data, status, message = stage()
    assert data is None
    assert status == STATUS_MAP[2]
    end = json.loads(artifacts.metrics_path.read_text().splitlines()[-1])
    assert end['type'] == 'end' and end['status'] == 'failed'


def test_success_messages_keep_their_default():
    assert SuccessMessages().client == 'Operation was successful.'
    assert SuccessMessages(logger='Logged only.').client == 'Operation was successful.'
    assert SuccessMessages('Run complete.').client == 'Run complete.'


def test_catching_without_messages_reports_the_default(tmp_path):
    artifacts = ArtifactManager(tmp_path, logger)

    @artifacts.catching()
    def stage():
        return {'ok': True}

    output = stage()
    assert output.status == STATUS_MAP[0]
    assert output.message == 'Operation was successful.'
    assert output.data == {'ok': True}
