# Checkpoint file layout (all integers little-endian):
#
#   offset  size  field
#   0       4     magic b"SDUC"
#   4       4     format version (uint32)
#   8       8     metadata length L (uint64)
#   16      L     metadata, UTF-8 JSON
#   16+L    ...   blob: float32 LE weights (parameters, then buffers), then the
#                 optional Adam m and v arrays in the same parameter order
#
# The metadata table lists every entry as {name, kind, shape, offset} with the
# offset measured from the start of the blob.

import json
import os
import struct
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from src.models.config import ModelConfig
from src.models.segnet import SegmentationNet, build_model
from src.nn.layers import Layer
from src.training.config import TrainConfig
from src.training.optimizer import Adam
from src.utils.config import config_to_mapping
from src.utils.errors import CheckpointError
from src.utils.logger import setup_logger

MAGIC = b'SDUC'
FORMAT_VERSION = 1
_HEADER = struct.Struct('<4sIQ')
_WIRE = np.dtype('<f4')


@dataclass
class Checkpoint:
    model_config: ModelConfig
    weights: Dict[str, np.ndarray]
    kinds: Dict[str, str]
    train_config: Optional[TrainConfig] = None
    epoch: int = 0
    history: List[Dict[str, Any]] = field(default_factory=list)
    adam: Optional[Dict[str, Any]] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def weight_bytes(self) -> int:
        return sum(array.size for array in self.weights.values()) * _WIRE.itemsize

    def build_model(self) -> SegmentationNet:
        """Model with the stored weights, in inference mode."""
        model = build_model(self.model_config)
        model.load_state_dict(self.weights)
        return model.eval()


def snapshot(model: SegmentationNet, train_config: Optional[TrainConfig] = None, epoch: int = 0,
             history: Optional[List[Dict[str, Any]]] = None, optimizer: Optional[Adam] = None,
             extra: Optional[Dict[str, Any]] = None) -> Checkpoint:
    weights, kinds = {}, {}
    for name, tensor in model.named_parameters():
        weights[name] = tensor.data.copy()
        kinds[name] = 'param'
    for name, array in model.named_buffers():
        weights[name] = array.copy()
        kinds[name] = 'buffer'
    return Checkpoint(model.cfg, weights, kinds, train_config, epoch, list(history or []),
                      optimizer.state_dict() if optimizer is not None else None, dict(extra or {}))


def _table(arrays: Dict[str, np.ndarray], kinds: Dict[str, str], start: int = 0) -> List[Dict[str, Any]]:
    rows, offset = [], start
    for name, array in arrays.items():
        rows.append({'name': name, 'kind': kinds[name], 'shape': list(array.shape), 'offset': offset})
        offset += array.size * _WIRE.itemsize
    return rows


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    blobs = [np.ascontiguousarray(a, dtype=_WIRE).tobytes() for a in ckpt.weights.values()]
    table = _table(ckpt.weights, ckpt.kinds)
    adam_meta = None
    if ckpt.adam is not None:
        names = [name for name, kind in ckpt.kinds.items() if kind == 'param']
        moments = {f'm:{n}': ckpt.adam['m'][n] for n in names}
        moments.update({f'v:{n}': ckpt.adam['v'][n] for n in names})
        adam_meta = {
            'step': int(ckpt.adam['step']),
            'tensors': _table(moments, {key: key[0] for key in moments}, ckpt.weight_bytes),
        }
        blobs.extend(np.ascontiguousarray(a, dtype=_WIRE).tobytes() for a in moments.values())

    metadata = {
        'model_config': config_to_mapping(ckpt.model_config),
        'train_config': config_to_mapping(ckpt.train_config) if ckpt.train_config else None,
        'epoch': ckpt.epoch,
        'history': ckpt.history,
        'tensors': table,
        'weight_bytes': ckpt.weight_bytes,
        'adam': adam_meta,
        'extra': ckpt.extra,
    }
    meta_bytes = json.dumps(metadata, sort_keys=True).encode('utf-8')
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(meta_bytes)) + meta_bytes + b''.join(blobs)


def _read_array(blob: bytes, row: Dict[str, Any], source: str) -> np.ndarray:
    shape = tuple(row['shape'])
    count = int(np.prod(shape, dtype=np.int64))
    start = int(row['offset'])
    end = start + count * _WIRE.itemsize
    if end > len(blob):
        raise CheckpointError(f"Truncated checkpoint blob in {source}: '{row['name']}' needs bytes {start}..{end}")
    return np.frombuffer(blob[start:end], dtype=_WIRE).astype(np.float32).reshape(shape)


def decode_checkpoint(data: bytes, source: str = '<buffer>') -> Checkpoint:
    if len(data) < _HEADER.size:
        raise CheckpointError(f"Checkpoint {source} is too short for a header")
    magic, version, meta_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic in {source}: expected {MAGIC!r}, got {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version} in {source}")
    meta_end = _HEADER.size + meta_len
    if meta_end > len(data):
        raise CheckpointError(f"Truncated checkpoint metadata in {source}")
    try:
        metadata = json.loads(data[_HEADER.size:meta_end].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint metadata in {source}: {e}")

    blob = data[meta_end:]
    weights, kinds = {}, {}
    for row in metadata['tensors']:
        weights[row['name']] = _read_array(blob, row, source)
        kinds[row['name']] = row['kind']
    if sum(a.size for a in weights.values()) * _WIRE.itemsize != metadata['weight_bytes']:
        raise CheckpointError(f"Checkpoint {source} weight table disagrees with the recorded blob length")

    adam = None
    if metadata.get('adam'):
        adam = {'step': metadata['adam']['step'], 'm': {}, 'v': {}}
        for row in metadata['adam']['tensors']:
            moment, name = row['name'].split(':', 1)
            adam[moment][name] = _read_array(blob, row, source)

    train_cfg = metadata.get('train_config')
    return Checkpoint(
        model_config=ModelConfig.from_mapping(metadata['model_config']),
        weights=weights,
        kinds=kinds,
        train_config=TrainConfig.from_mapping(train_cfg) if train_cfg else None,
        epoch=int(metadata.get('epoch', 0)),
        history=list(metadata.get('history', [])),
        adam=adam,
        extra=dict(metadata.get('extra', {})),
    )


class CheckpointStore:
    """Reads and atomically writes checkpoint files."""

    MAX_RETRIES = 3

    def __init__(self):
        self.logger = setup_logger('CheckpointStore')

    def save(self, ckpt: Checkpoint, path: str):
        payload = encode_checkpoint(ckpt)
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)

        retry_count = 0
        while retry_count < self.MAX_RETRIES:
            temp_file = os.path.join(directory, f'.{os.path.basename(path)}.{os.getpid()}.{int(time.time() * 1e6)}.tmp')
            try:
                with open(temp_file, 'wb') as f:
                    f.write(payload)
                    f.flush()
                    os.fsync(f.fileno())

                # Verify temp file
                with open(temp_file, 'rb') as f:
                    if f.read() != payload:
                        raise CheckpointError("Data verification failed for temp file")

                os.replace(temp_file, path)

                # Final verification
                if os.path.getsize(path) != len(payload):
                    raise CheckpointError("Final size verification failed")

                self.logger.debug(f"Checkpoint saved to {path} ({len(payload)} bytes, epoch {ckpt.epoch})")
                return
            except OSError as e:
                retry_count += 1
                self.logger.error(f"Save attempt {retry_count} for {path} failed: {e}")
                if retry_count == self.MAX_RETRIES:
                    raise CheckpointError(f"Could not write checkpoint {path}: {e}")
            finally:
                if os.path.exists(temp_file):
                    try:
                        os.remove(temp_file)
                    except OSError as e:
                        self.logger.warning(f"Could not clean up temp file {temp_file}: {e}")

    def load(self, path: str) -> Checkpoint:
        try:
            with open(path, 'rb') as f:
                data = f.read()
        except OSError as e:
            self.logger.error(f"Cannot read checkpoint {path}: {e}")
            raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
        return decode_checkpoint(data, path)


def save_checkpoint(ckpt: Checkpoint, path: str):
    CheckpointStore().save(ckpt, path)


def load_checkpoint(path: str) -> Checkpoint:
    return CheckpointStore().load(path)


def restore(model: Layer, ckpt: Checkpoint, optimizer: Optional[Adam] = None):
    """Copy stored weights (and optionally Adam moments) into live objects."""
    model.load_state_dict(ckpt.weights)
    if optimizer is not None:
        if ckpt.adam is None:
            raise CheckpointError("Checkpoint carries no optimizer state to resume from")
        optimizer.load_state_dict(ckpt.adam)
