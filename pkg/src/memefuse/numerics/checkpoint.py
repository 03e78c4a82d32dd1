"""Parameter checkpoint archive.

A checkpoint is a zip file with one ``header.json`` entry and one raw
little-endian float64 blob per parameter. Entry metadata is pinned (stored,
epoch timestamp) so identical parameters produce bit-identical files.
"""

from __future__ import annotations

import hashlib
import json
import zipfile

import numpy as np

from ..errors import InputError
from .tensor import Tensor

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def config_hash(config: dict) -> str:
    """Stable hash of a config dict (canonical JSON, sorted keys)."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    return info


def save_checkpoint(path, params: dict[str, Tensor], header_extra: dict | None = None) -> None:
    """Write parameters plus a header carrying format version and extras."""
    paths = list(params.keys())
    header = {
        "format_version": FORMAT_VERSION,
        "params": {p: list(params[p].data.shape) for p in paths},
        "order": paths,
    }
    if header_extra:
        header.update(header_extra)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_entry("header.json"), json.dumps(header, sort_keys=True, indent=1))
        for i, p in enumerate(paths):
            blob = np.ascontiguousarray(params[p].data, dtype="<f8").tobytes()
            zf.writestr(_entry(f"params/{i:06d}.bin"), blob)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (header, {param path: float64 array})."""
    with zipfile.ZipFile(path, "r") as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format_version") != FORMAT_VERSION:
            raise InputError(
                f"unsupported checkpoint format version {header.get('format_version')}")
        arrays = {}
        for i, p in enumerate(header["order"]):
            blob = zf.read(f"params/{i:06d}.bin")
            shape = tuple(header["params"][p])
            arrays[p] = np.frombuffer(blob, dtype="<f8").reshape(shape).astype(np.float64)
    return header, arrays


def restore_params(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into live parameter tensors, validating shapes."""
    missing = set(params) - set(arrays)
    if missing:
        raise InputError(f"checkpoint is missing parameters: {sorted(missing)[:5]}")
    for path, p in params.items():
        arr = arrays[path]
        if arr.shape != p.data.shape:
            raise InputError(
                f"checkpoint parameter '{path}' has shape {arr.shape}, expected {p.data.shape}")
        p.data[...] = arr
