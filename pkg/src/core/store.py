from src.core.schemas import RunOutput, SuccessMessages, ConfigError, DEFAULT_SUCCESS
from src.core.security import hash_payload

from collections import namedtuple
from functools import wraps
from logging import Logger
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import struct
import json
import yaml


ErrorObject = namedtuple('ErrorObject', ['status_code', 'client_message', 'logger_message'])

STATUS_MAP = {
    0: 0    # success
    , 1: 1  # configuration error
    , 2: 2  # runtime failure
}

CHECKPOINT_MAGIC = b'FEDPEFT-CKPT\n'
CHECKPOINT_SCHEMA = 'fedpeft/checkpoint-v1'


class CheckpointError(ValueError):
    pass


ERROR_MAP = {
    ConfigError: ErrorObject(
        STATUS_MAP[1]
        , "Configuration error."
        , "The configuration cannot describe a valid experiment."
    )

    , yaml.YAMLError: ErrorObject(
        STATUS_MAP[1]
        , "Unreadable configuration file."
        , "The configuration file is not valid YAML."
    )

    , FileNotFoundError: ErrorObject(
        STATUS_MAP[1]
        , "File not found."
        , "A referenced file does not exist."
    )

    , CheckpointError: ErrorObject(
        STATUS_MAP[2]
        , "Checkpoint error."
        , "A checkpoint could not be read or failed its digest check."
    )

    , Exception: ErrorObject(
        STATUS_MAP[2]
        , "Run failed."
        , "An error occurred while running the experiment."
    )
}


def lookup_error(exc: BaseException) -> ErrorObject:
    for cls in type(exc).__mro__:
        if cls in ERROR_MAP:
            return ERROR_MAP[cls]
    return ERROR_MAP[Exception]


def save_checkpoint(state: Dict[str, np.ndarray], path: Path, extensions: dict = None) -> Path:
    """
    Writes a checkpoint: a magic line, an 8-byte little-endian header length, a JSON manifest (name,
    shape and byte offset per entry, in lexicographic name order) and the payload of little-endian
    float32 values.
    """
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        raw = np.ascontiguousarray(state[name], dtype='<f4').tobytes()
        entries.append({'name': name, 'shape': list(np.shape(state[name])), 'offset': offset})
        chunks.append(raw)
        offset += len(raw)

    payload = b''.join(chunks)
    manifest = {
        'schema': CHECKPOINT_SCHEMA
        , 'entries': entries
        , 'payload_bytes': len(payload)
        , 'digest': hash_payload(payload)
        , 'extensions': extensions or {}
    }
    header = json.dumps(manifest, sort_keys=True).encode('utf-8')

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<Q', len(header)))
        f.write(header)
        f.write(payload)
    return path


def load_checkpoint(path: Path) -> Tuple[Dict[str, np.ndarray], dict]:
    """
    Reads a checkpoint written by `save_checkpoint`.

    Returns:
        - Tuple[Dict[str, np.ndarray], dict]: float32 values by name, and the manifest.
    """
    with open(path, 'rb') as f:
        blob = f.read()

    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"<{path}> is not a checkpoint.")
    cursor = len(CHECKPOINT_MAGIC)
    (header_length,) = struct.unpack('<Q', blob[cursor:cursor + 8])
    cursor += 8
    manifest = json.loads(blob[cursor:cursor + header_length].decode('utf-8'))
    payload = blob[cursor + header_length:]

    if manifest.get('schema') != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"Unsupported checkpoint schema <{manifest.get('schema')}>.")
    if len(payload) != manifest['payload_bytes'] or hash_payload(payload) != manifest['digest']:
        raise CheckpointError(f"Checkpoint <{path}> failed its digest check.")

    state = {}
    for entry in manifest['entries']:
        count = int(np.prod(entry['shape'], dtype=np.int64))
        values = np.frombuffer(payload, dtype='<f4', count=count, offset=entry['offset'])
        state[entry['name']] = values.reshape(entry['shape']).astype(np.float32)
    return state, manifest


class ArtifactManager():
    """
    Owns one experiment's output directory: checkpoints, dataset dumps and the JSON-lines metrics file.
    The metrics file always ends with a terminal `end` record, so partial runs can be told apart from
    complete ones.

    Args:
        - output_dir (str | Path): Where artifacts are written.
        - logger (Logger): The logger object for logging.

    Methods:
        - checkpoint: Saves a state dict under the output directory.
        - dump_dataset: Writes a dataset manifest and its raw float32 frames.
        - open_metrics / write_record / finish: The metrics stream.
        - catching: Decorator that runs a stage and maps failures to exit statuses.
    """

    def __init__(self, output_dir, logger: Logger):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.logger = logger
        self.metrics_path: Optional[Path] = None
        self.records: List[dict] = []
        self._finished = False

    def checkpoint(self, state: Dict[str, np.ndarray], name: str, extensions: dict = None) -> Path:
        path = save_checkpoint(state, self.output_dir / name, extensions)
        self.logger.info(f"Checkpoint written to <{path}>.")
        return path

    def dump_dataset(self, dataset, name: str) -> Path:
        """
        Writes `<name>.json` (shape, labels) and `<name>.bin` (little-endian float32 frames).
        """
        frames_path = self.output_dir / f"{name}.bin"
        manifest_path = self.output_dir / f"{name}.json"
        frames = np.ascontiguousarray(dataset.videos, dtype='<f4')

        with open(frames_path, 'wb') as f:
            f.write(frames.tobytes())
        with open(manifest_path, 'w') as f:
            json.dump({
                'shape': list(frames.shape)
                , 'dtype': 'float32-le'
                , 'labels': [int(label) for label in dataset.labels]
                , 'frames_file': frames_path.name
            }, f)

        self.logger.info(f"Dataset <{name}> dumped to <{manifest_path}>.")
        return manifest_path

    def open_metrics(self, name: str = 'metrics.jsonl') -> Path:
        self.metrics_path = self.output_dir / name
        self.records = []
        self._finished = False
        self.metrics_path.write_text('')
        return self.metrics_path

    def write_record(self, record: dict):
        if self.metrics_path is None:
            self.open_metrics()
        self.records.append(record)
        with open(self.metrics_path, 'a') as f:
            f.write(json.dumps(record, sort_keys=True) + '\n')

    def finish(self, status: str, error: str = None):
        if self.metrics_path is None or self._finished:
            return
        marker = {'type': 'end', 'status': status}
        if error:
            marker['error'] = error
        self.write_record(marker)
        self._finished = True

    def catching(self, messages: SuccessMessages = None):
        """
        Decorator that runs a harness stage and handles failures gracefully.

        How to declare:
            - Place decorator above function like so:\n
            >>> @artifacts.catching(messages=SuccessMessages('Run complete.'))
                def fn():

        Returns:
            - A `RunOutput` with the stage's data, the exit status and a message. On failure the metrics
              file (if open) receives a `failed` terminal marker.
        """
        def decorator(func):
            @wraps(func)
            def wrapper(*args, **kwargs):
                try:
                    content = func(*args, **kwargs)

                    if messages and messages.logger:
                        self.logger.info(messages.logger)

                    return RunOutput(
                        data=content
                        , status=STATUS_MAP[0]
                        , message=messages.client if messages else DEFAULT_SUCCESS
                    )
                except Exception as e:
                    error = lookup_error(e)
                    self.logger.error(f"{error.logger_message}\nMethod: <{func.__name__}>\nMessage:\n\n {e}.\n")
                    self.finish('failed', error=f"{type(e).__name__}: {e}")

                    return RunOutput(
                        data=None
                        , status=error.status_code
                        , message=f"{error.client_message} {e}"
                    )
            return wrapper
        return decorator
