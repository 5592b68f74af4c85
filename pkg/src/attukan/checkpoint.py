"""Checkpoints: a JSON manifest plus one little-endian float32 blob.

``<path>`` holds the manifest, ``<path>.bin`` the blob. The manifest lists
every array as ``{name, shape, dtype, offset}`` and echoes the run config,
training position, optimizer step counters and the data RNG state.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import Model, ModelConfig, build

FORMAT_VERSION = 1
BLOB_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    """Malformed, inconsistent or incompatible checkpoint."""


@dataclass
class TrainState:
    """Training position stored next to the weights so a run can resume."""

    epoch: int = 0
    step: int = 0
    rng_state: dict | None = None
    best_val_f1: float | None = None
    extra: dict = field(default_factory=dict)


def blob_path(path) -> Path:
    return Path(f"{path}.bin")


def _arrays(model: Model) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, p in model.store.entries.items():
        out.append((f"param/{name}", p.value.data))
        out.append((f"adam_m/{name}", p.m))
        out.append((f"adam_v/{name}", p.v))
    for name, stats in model.buffers.items():
        out.append((f"buffer/{name}.mean", stats.mean))
        out.append((f"buffer/{name}.var", stats.var))
    return out


def encode(model: Model, run_config: dict | None = None, state: TrainState | None = None) -> tuple[bytes, bytes]:
    """(manifest bytes, blob bytes) for ``model``."""
    state = state or TrainState()
    entries = []
    chunks = []
    offset = 0
    for name, arr in _arrays(model):
        data = np.ascontiguousarray(arr, dtype=BLOB_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "run_config": run_config,
        "adam_t": {name: p.t for name, p in model.store.entries.items()},
        "epoch": state.epoch,
        "step": state.step,
        "rng_state": state.rng_state,
        "best_val_f1": state.best_val_f1,
        "extra": state.extra,
        "tensors": entries,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    text = json.dumps(manifest, sort_keys=True, indent=1) + "\n"
    return text.encode(), blob


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = Path(f"{path}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save(path, model: Model, run_config: dict | None = None, state: TrainState | None = None) -> None:
    manifest, blob = encode(model, run_config, state)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    _write_atomic(blob_path(path), blob)
    _write_atomic(Path(path), manifest)


@dataclass
class Loaded:
    model: Model
    run_config: dict | None
    state: TrainState
    manifest: dict


def decode(manifest_bytes: bytes, blob: bytes) -> Loaded:
    """Validate everything first, then build the model; a failure never leaves partial state."""
    try:
        manifest = json.loads(manifest_bytes)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"manifest is not valid JSON: {e}") from None
    if not isinstance(manifest, dict):
        raise CheckpointError("manifest must be a JSON object")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version!r} (expected {FORMAT_VERSION})")
    for key in ("model_config", "tensors", "blob_bytes", "adam_t"):
        if key not in manifest:
            raise CheckpointError(f"manifest is missing {key!r}")
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"blob length {len(blob)} disagrees with manifest ({manifest['blob_bytes']} bytes)")
    digest = manifest.get("blob_sha256")
    if digest is not None and hashlib.sha256(blob).hexdigest() != digest:
        raise CheckpointError("blob checksum does not match the manifest")
    try:
        config = ModelConfig.from_dict(manifest["model_config"])
    except (TypeError, ValueError, KeyError) as e:
        raise CheckpointError(f"invalid model config in manifest: {e}") from None

    model = build(config)
    expected = {name: arr for name, arr in _arrays(model)}
    listed = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in expected:
            raise CheckpointError(f"checkpoint tensor {name!r} does not exist in the model")
        shape = tuple(entry["shape"])
        if shape != expected[name].shape:
            raise CheckpointError(f"{name}: checkpoint shape {shape} != model shape {expected[name].shape}")
        if entry.get("dtype") != "float32":
            raise CheckpointError(f"{name}: unsupported dtype {entry.get('dtype')!r}")
        n = int(np.prod(shape)) * BLOB_DTYPE.itemsize
        off = int(entry["offset"])
        if off < 0 or off + n > len(blob):
            raise CheckpointError(f"{name}: byte range [{off}, {off + n}) exceeds the blob")
        listed[name] = np.frombuffer(blob, dtype=BLOB_DTYPE, count=n // BLOB_DTYPE.itemsize, offset=off).reshape(shape)
    missing = sorted(set(expected) - set(listed))
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[0]!r}")
    if set(manifest["adam_t"]) != set(model.store.entries):
        raise CheckpointError("adam step counters do not match the parameter list")

    # everything validated: copy into the fresh model
    for name, arr in listed.items():
        expected[name][...] = arr
    for name, t in manifest["adam_t"].items():
        model.store.entries[name].t = int(t)
    state = TrainState(
        epoch=int(manifest.get("epoch", 0)),
        step=int(manifest.get("step", 0)),
        rng_state=manifest.get("rng_state"),
        best_val_f1=manifest.get("best_val_f1"),
        extra=manifest.get("extra") or {},
    )
    return Loaded(model, manifest.get("run_config"), state, manifest)


def load(path) -> Loaded:
    path = Path(path)
    try:
        manifest = path.read_bytes()
        blob = blob_path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
    return decode(manifest, blob)
