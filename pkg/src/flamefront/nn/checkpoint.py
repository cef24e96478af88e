"""Self-describing checkpoint files.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then
raw little-endian float64 buffers at the offsets the header lists
(relative to the end of the header).
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .models import OperatorModel, config_from_dict, model_from_weights
from .optim import Adam, AdamState
from ..utils.errors import StorageError

logger = logging.getLogger(__name__)

FORMAT = 'flamefront-checkpoint-1'
_LENGTH = struct.Struct('<Q')


@dataclass
class Checkpoint:
    """Model weights plus everything needed to resume training."""
    kind: str
    config: dict
    weights: Dict[str, np.ndarray]
    epoch: int = 0
    optimizer: Optional[AdamState] = None
    lr: Optional[float] = None
    rng_state: Optional[dict] = None
    metrics: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: OperatorModel, epoch: int = 0, optimizer: Optional[Adam] = None,
                   rng: Optional[np.random.Generator] = None, metrics: Optional[dict] = None) -> 'Checkpoint':
        state = None
        if optimizer is not None:
            state = AdamState(step=optimizer.state.step,
                              m=[m.copy() for m in optimizer.state.m],
                              v=[v.copy() for v in optimizer.state.v])
        return cls(
            kind=model.kind,
            config=model.config.to_dict(),
            weights=model.state_dict(),
            epoch=epoch,
            optimizer=state,
            lr=optimizer.lr if optimizer is not None else None,
            rng_state=rng.bit_generator.state if rng is not None else None,
            metrics=dict(metrics or {}),
        )

    def to_model(self) -> OperatorModel:
        config = config_from_dict(self.kind, self.config)
        return model_from_weights(self.kind, config, self.weights)


def _buffers(checkpoint: Checkpoint) -> List[tuple]:
    entries = [(f'model/{name}', value) for name, value in checkpoint.weights.items()]
    if checkpoint.optimizer is not None:
        names = list(checkpoint.weights)
        entries += [(f'adam.m/{name}', m) for name, m in zip(names, checkpoint.optimizer.m)]
        entries += [(f'adam.v/{name}', v) for name, v in zip(names, checkpoint.optimizer.v)]
    return entries


def _finite_or_none(metrics: dict) -> dict:
    """JSON has no inf or nan; such metric values are stored as null."""
    return {key: (None if isinstance(value, float) and not np.isfinite(value) else value)
            for key, value in metrics.items()}


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> Path:
    """Write a checkpoint atomically.

    Args:
        path: Destination file
        checkpoint: Checkpoint to serialize

    Returns:
        The path written

    Raises:
        StorageError: If the file cannot be written
    """
    path = Path(path)
    manifest = []
    blobs = []
    offset = 0
    for name, value in _buffers(checkpoint):
        blob = np.ascontiguousarray(value, dtype='<f8').tobytes()
        manifest.append({'name': name, 'shape': list(np.shape(value)), 'dtype': 'float64',
                         'offset': offset, 'nbytes': len(blob)})
        blobs.append(blob)
        offset += len(blob)

    header = {
        'format': FORMAT,
        'kind': checkpoint.kind,
        'config': checkpoint.config,
        'epoch': checkpoint.epoch,
        'rng_state': checkpoint.rng_state,
        'optimizer': None if checkpoint.optimizer is None else {
            'step': checkpoint.optimizer.step, 'lr': checkpoint.lr,
        },
        'metrics': _finite_or_none(checkpoint.metrics),
        'tensors': manifest,
    }
    try:
        encoded = json.dumps(header, sort_keys=True, allow_nan=False).encode('utf-8')
    except ValueError as e:
        raise StorageError(f"Checkpoint header for {path} is not valid JSON: {e}")

    tmp = path.with_name(path.name + '.tmp')
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, 'wb') as f:
            f.write(_LENGTH.pack(len(encoded)))
            f.write(encoded)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except OSError as e:
        raise StorageError(f"Failed to write checkpoint {path}: {e}")

    logger.info(f"Saved checkpoint {path} (epoch {checkpoint.epoch})")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint.

    Null metrics come back as None.

    Raises:
        StorageError: If the file is missing, truncated or malformed
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise StorageError(f"Cannot read checkpoint {path}: {e}")

    if len(raw) < _LENGTH.size:
        raise StorageError(f"Checkpoint {path} is truncated")
    (length,) = _LENGTH.unpack_from(raw)
    start = _LENGTH.size + length
    try:
        header = json.loads(raw[_LENGTH.size:start].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise StorageError(f"Malformed checkpoint header in {path}: {e}")
    if not isinstance(header, dict) or header.get('format') != FORMAT:
        raise StorageError(f"{path} is not a {FORMAT} file")

    try:
        return _decode(header, raw, start, path)
    except (KeyError, TypeError, ValueError) as e:
        raise StorageError(f"Malformed checkpoint {path}: missing or invalid field {e}")


def _decode(header: dict, raw: bytes, start: int, path: Path) -> Checkpoint:
    arrays: Dict[str, np.ndarray] = {}
    for entry in header['tensors']:
        begin = start + entry['offset']
        if begin + entry['nbytes'] > len(raw):
            raise StorageError(f"Checkpoint {path} is truncated at tensor {entry['name']}")
        count = entry['nbytes'] // 8
        values = np.frombuffer(raw, dtype='<f8', count=count, offset=begin)
        arrays[entry['name']] = values.astype(np.float64).reshape(entry['shape'])

    weights = {name[len('model/'):]: value for name, value in arrays.items()
               if name.startswith('model/')}
    optimizer = None
    if header.get('optimizer') is not None:
        optimizer = AdamState(
            step=int(header['optimizer']['step']),
            m=[arrays[f'adam.m/{name}'] for name in weights],
            v=[arrays[f'adam.v/{name}'] for name in weights],
        )

    return Checkpoint(
        kind=header['kind'],
        config=header['config'],
        weights=weights,
        epoch=int(header['epoch']),
        optimizer=optimizer,
        lr=header['optimizer']['lr'] if optimizer is not None else None,
        rng_state=header.get('rng_state'),
        metrics=dict(header.get('metrics') or {}),
    )
