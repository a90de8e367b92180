"""Binary model checkpoints.

Layout::

    b"DASL1"                      magic
    uint32 little-endian          header length in bytes
    header                        UTF-8 JSON, sorted keys: model dims, overlap
                                  users, and [name, shape] per parameter
    float64 little-endian blocks  one per parameter, in registry order

Nothing in the file depends on wall time or the host, so identical models
give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import DaslModel, ModelConfig

MAGIC = b"DASL1"


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: DaslModel) -> bytes:
    params = list(model.named_parameters())
    header = {
        "dims": model.dims(),
        "overlap_users": np.flatnonzero(model.overlap_mask).tolist(),
        "params": [[name, list(p.shape)] for name, p in params],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blocks = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for _, p in params)
    return MAGIC + struct.pack("<I", len(head)) + head + blocks


def save_checkpoint(path, model: DaslModel) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


def read_header(blob: bytes) -> tuple[dict, int]:
    """(header, offset of the first parameter block)."""
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic bytes {blob[:len(MAGIC)]!r}, expected {MAGIC!r}")
    start = len(MAGIC) + 4
    if len(blob) < start:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<I", blob[len(MAGIC):start])
    try:
        header = json.loads(blob[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    return header, start + n


def _model_from_dims(dims: dict, features=None) -> DaslModel:
    cfg = dict(dims["model"])
    cfg["ae_hidden"] = tuple(cfg["ae_hidden"])
    return DaslModel(dims["n_users"], {"A": dims["n_items_A"], "B": dims["n_items_B"]},
                     ModelConfig(**cfg), dims["variant"], dims["seed"], features)


def load_checkpoint(path_or_bytes, expected_dims: dict | None = None,
                    features: dict | None = None) -> DaslModel:
    """Rebuild the model; ``expected_dims`` (from ``model.dims()``) must match if given."""
    blob = path_or_bytes if isinstance(path_or_bytes, bytes) else Path(path_or_bytes).read_bytes()
    header, offset = read_header(blob)
    dims = header["dims"]
    if expected_dims is not None and dims != expected_dims:
        diff = sorted(k for k in set(dims) | set(expected_dims) if dims.get(k) != expected_dims.get(k))
        raise CheckpointError(f"checkpoint dimensions differ from the config in {diff}")
    model = _model_from_dims(dims, features)
    params = list(model.named_parameters())
    stored = [(name, tuple(shape)) for name, shape in header["params"]]
    if stored != [(name, p.shape) for name, p in params]:
        raise CheckpointError("checkpoint parameter registry does not match the model")
    for _, p in params:
        n = p.size * 8
        if offset + n > len(blob):
            raise CheckpointError("truncated parameter block")
        p.data[...] = np.frombuffer(blob, dtype="<f8", count=p.size, offset=offset).reshape(p.shape)
        offset += n
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after the last block")
    model.set_overlap(header["overlap_users"])
    return model
