"""Manifest + raw float32 blob persistence for named tensors.

``<prefix>.json`` holds ``{"version", "tensors": [...], ...meta}`` and
``<prefix>.bin`` the little-endian float32 data, concatenated in index order.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ValidationError

FORMAT_VERSION = 1


def dump_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def save_tensors(prefix: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    index, offset, chunks = [], 0, []
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        index.append({"name": name, "shape": list(data.shape), "offset": offset, "count": int(data.size)})
        offset += data.size
        chunks.append(data.reshape(-1).tobytes())
    manifest = {"version": FORMAT_VERSION, "blob": prefix.name + ".bin", "tensors": index, **(meta or {})}
    prefix.with_suffix(".bin").write_bytes(b"".join(chunks))
    dump_json(prefix.with_suffix(".json"), manifest)
    return prefix.with_suffix(".json")


def load_manifest(prefix: str | Path) -> dict:
    path = Path(prefix).with_suffix(".json")
    if not path.exists():
        raise ValidationError(f"missing artifact manifest {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported version {manifest.get('version')!r}")
    return manifest


def load_tensors(prefix: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    manifest = load_manifest(prefix)
    raw = np.frombuffer(Path(prefix).with_suffix(".bin").read_bytes(), dtype="<f4")
    tensors = {}
    for entry in manifest["tensors"]:
        lo = entry["offset"]
        chunk = raw[lo: lo + entry["count"]]
        if chunk.size != entry["count"]:
            raise ValidationError(f"truncated blob for tensor {entry['name']}")
        tensors[entry["name"]] = chunk.reshape(entry["shape"]).astype(np.float32)
    return manifest, tensors
