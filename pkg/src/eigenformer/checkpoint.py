"""Binary model checkpoints.

Layout (little-endian): magic ``EIGF``, u32 version, u64 config digest,
u32 length + UTF-8 JSON of config and feature schema, u32 block count, then
per block: u32 name length, name bytes, u32 ndim, u32 shape[ndim], f64 data.
Blocks cover every parameter and batch-norm running statistic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import FeatureSchema, TrainConfig, config_digest
from .model import EigenformerModel
from .training import load_state_dict, state_dict

__all__ = ["CheckpointError", "Checkpoint", "save_checkpoint", "load_checkpoint", "restore_model"]

MAGIC = b"EIGF"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    schema: FeatureSchema
    digest: int
    state: dict[str, np.ndarray]


def save_checkpoint(path: str | Path, config: TrainConfig, schema: FeatureSchema,
                    state: dict[str, np.ndarray]) -> int:
    digest = config_digest(config, schema)
    meta = json.dumps({"config": config.to_dict(), "schema": schema.to_dict()}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<IQI", VERSION, digest, len(meta)), meta, struct.pack("<I", len(state))]
    for name, arr in state.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))
    return digest


def load_checkpoint(path: str | Path, expect: tuple[TrainConfig, FeatureSchema] | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect`` the stored digest must match it."""
    data = Path(path).read_bytes()
    try:
        if data[:4] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {data[:4]!r})")
        version, digest, mlen = struct.unpack_from("<IQI", data, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
        off = 4 + 16
        meta = json.loads(data[off:off + mlen])
        off += mlen
        config = TrainConfig.from_dict(meta["config"])
        schema = FeatureSchema.from_dict(meta["schema"])
        if config_digest(config, schema) != digest:
            raise CheckpointError(f"{path}: embedded config does not match its digest")
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            name = data[off + 4:off + 4 + nlen].decode()
            off += 4 + nlen
            (ndim,) = struct.unpack_from("<I", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
            off += 4 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if off + 8 * size > len(data):
                raise CheckpointError(f"{path}: truncated block {name!r}")
            state[name] = np.frombuffer(data, "<f8", size, off).astype(np.float64).reshape(shape)
            off += 8 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    if expect is not None:
        want = config_digest(*expect)
        if want != digest:
            raise CheckpointError(
                f"{path}: config digest {digest:016x} does not match the supplied config ({want:016x})"
            )
    return Checkpoint(config, schema, digest, state)


def restore_model(ckpt: Checkpoint) -> EigenformerModel:
    model = EigenformerModel(ckpt.config, ckpt.schema)
    load_state_dict(model, ckpt.state)
    return model
