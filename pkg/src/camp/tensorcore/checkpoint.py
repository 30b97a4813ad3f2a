"""Binary checkpoint container for named parameter tensors.

Layout: one format-version byte, an 8-byte little-endian manifest length, a
UTF-8 JSON manifest mapping each name to its shape and element offset, then
the concatenated float64 little-endian payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .optim import ParameterTree
from .tensor import TensorError

FORMAT_VERSION = 1


class CheckpointError(TensorError):
    """Raised on malformed checkpoint files."""


def save_checkpoint(values: dict[str, np.ndarray] | ParameterTree, path) -> None:
    if isinstance(values, ParameterTree):
        values = values.value_dict()
    manifest = []
    offset = 0
    chunks = []
    for name, arr in values.items():
        arr = np.asarray(arr, dtype=np.float64)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.reshape(-1))
    payload = (
        np.concatenate(chunks) if chunks else np.empty(0, dtype=np.float64)
    ).astype("<f8")
    blob = json.dumps({"tensors": manifest}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(bytes([FORMAT_VERSION]))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 9:
        raise CheckpointError("checkpoint file truncated")
    if raw[0] != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {raw[0]}")
    (blob_len,) = struct.unpack("<Q", raw[1:9])
    blob_end = 9 + blob_len
    if len(raw) < blob_end:
        raise CheckpointError("checkpoint manifest truncated")
    try:
        manifest = json.loads(raw[9:blob_end].decode("utf-8"))["tensors"]
    except (ValueError, KeyError) as exc:
        raise CheckpointError("checkpoint manifest unreadable") from exc
    payload = np.frombuffer(raw[blob_end:], dtype="<f8")
    values: dict[str, np.ndarray] = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + size > payload.size:
            raise CheckpointError(f"payload truncated for tensor {entry['name']!r}")
        values[entry["name"]] = (
            payload[start : start + size].astype(np.float64).reshape(shape)
        )
    return values


def load_into(params: ParameterTree, path) -> None:
    params.load_value_dict(load_checkpoint(path))
