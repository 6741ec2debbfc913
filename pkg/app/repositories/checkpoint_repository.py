"""Binary weight checkpoints.

Layout, all integers little-endian:

    4 bytes   magic b'DVRW'
    u32       format version (1)
    u32       header length in bytes
    header    UTF-8 JSON: config_hash, step, epoch, shape, tensors[{name, shape, offset}]
    data      float32 little-endian tensors; offsets count bytes from the start of data
"""
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from app.exceptions import ConfigMismatch
from app.models.denoiser_params import DenoiserParams
from app.repositories.scene_repository import atomic_write

MAGIC = b'DVRW'
VERSION = 1
ADAM_M = 'adam.m/'
ADAM_V = 'adam.v/'


@dataclass
class Checkpoint:
    params: DenoiserParams
    config_hash: str
    step: int = 0
    epoch: int = 0
    adam_step: int = 0
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    extra: Dict[str, object] = field(default_factory=dict)


class CheckpointRepository:
    """Reads and writes the versioned float32 checkpoint format"""

    def save(self, filepath: str, checkpoint: Checkpoint) -> None:
        params = checkpoint.params
        tensors = {name: params.tensors[name] for name in params}
        tensors.update({ADAM_M + k: v for k, v in sorted(checkpoint.adam_m.items())})
        tensors.update({ADAM_V + k: v for k, v in sorted(checkpoint.adam_v.items())})

        directory, blobs, offset = [], [], 0
        for name, tensor in tensors.items():
            blob = np.ascontiguousarray(tensor, dtype='<f4').tobytes()
            directory.append({'name': name, 'shape': list(tensor.shape), 'offset': offset})
            blobs.append(blob)
            offset += len(blob)

        header = {
            'config_hash': checkpoint.config_hash,
            'step': checkpoint.step,
            'epoch': checkpoint.epoch,
            'adam_step': checkpoint.adam_step,
            'shape': params.shape_dict(),
            'tensors': directory,
            'extra': checkpoint.extra,
        }
        header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')

        parent = os.path.dirname(filepath)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with atomic_write(filepath) as tmp:
            with open(tmp, 'wb') as f:
                f.write(MAGIC)
                f.write(struct.pack('<II', VERSION, len(header_bytes)))
                f.write(header_bytes)
                for blob in blobs:
                    f.write(blob)

    def read_header(self, filepath: str) -> dict:
        header, _ = self._read(filepath)
        return header

    def load(self, filepath: str, expected_shape: Optional[Dict[str, int]] = None) -> Checkpoint:
        """
        Load a checkpoint.

        Args:
            filepath: Checkpoint file
            expected_shape: embed_dim / num_heads / horizon / modes the caller needs

        Returns:
            Checkpoint: weights, optimizer moments and header fields
        """
        header, data = self._read(filepath)
        shape = header['shape']
        if expected_shape is not None and shape != expected_shape:
            raise ConfigMismatch(f"checkpoint shape {shape} does not match configuration {expected_shape}")

        tensors, adam_m, adam_v = {}, {}, {}
        for entry in header['tensors']:
            count = int(np.prod(entry['shape'])) if entry['shape'] else 1
            array = np.frombuffer(data, dtype='<f4', count=count, offset=entry['offset'])
            array = array.astype(np.float64).reshape(entry['shape'])
            name = entry['name']
            if name.startswith(ADAM_M):
                adam_m[name[len(ADAM_M):]] = array
            elif name.startswith(ADAM_V):
                adam_v[name[len(ADAM_V):]] = array
            else:
                tensors[name] = array
        params = DenoiserParams(shape['embed_dim'], shape['num_heads'], shape['horizon'], shape['modes'], tensors)
        return Checkpoint(params, header['config_hash'], header.get('step', 0), header.get('epoch', 0),
                          header.get('adam_step', 0), adam_m, adam_v, header.get('extra', {}))

    def _read(self, filepath: str):
        if not os.path.exists(filepath):
            raise FileNotFoundError(f"Checkpoint not found at: {filepath}")
        with open(filepath, 'rb') as f:
            raw = f.read()
        if raw[:4] != MAGIC:
            raise RuntimeError(f"{filepath} is not a weight checkpoint")
        version, header_len = struct.unpack('<II', raw[4:12])
        if version != VERSION:
            raise RuntimeError(f"{filepath}: unsupported checkpoint version {version}")
        try:
            header = json.loads(raw[12:12 + header_len].decode('utf-8'))
        except Exception as e:
            raise RuntimeError(f"Error decoding checkpoint header in {filepath}: {e}")
        return header, raw[12 + header_len:]
