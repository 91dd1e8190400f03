"""Binary checkpoint format.

Layout::

    b"EMSRDPN1"                       8-byte magic
    uint64 little-endian               header length in bytes
    header                             UTF-8 JSON: {"config", "tensors": [{"name", "shape"}], "train_state"}
    payloads                           little-endian float32, one per index entry, in index order

Entries whose names are not network parameters (optimizer moments) follow
the parameters and are returned separately.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .network import NetworkConfig, ParameterStore, param_shapes
from .tensor import parameter

MAGIC = b"EMSRDPN1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config: NetworkConfig, params: ParameterStore,
                    extra: dict[str, np.ndarray] | None = None, train_state: dict | None = None) -> None:
    path = Path(path)
    arrays = [(name, params[name].data) for name in param_shapes(config)]
    arrays += sorted((extra or {}).items())
    header = {
        "config": config.to_dict(),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "train_state": train_state,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(config, params, extra, train_state)``; shapes are validated against the config."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + n].decode())
        config = NetworkConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid header ({exc})") from exc

    expected = param_shapes(config)
    offset = 16 + n
    params: ParameterStore = {}
    extra: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arr = np.frombuffer(raw[offset:end], dtype="<f4").astype(np.float32).reshape(shape)
        offset = end
        if name in expected:
            if shape != expected[name]:
                raise CheckpointError(f"{path}: {name} has shape {shape}, config implies {expected[name]}")
            params[name] = parameter(arr, name)
        else:
            extra[name] = arr
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")
    params = {name: params[name] for name in expected}
    return config, params, extra, header.get("train_state")

