"""Checkpoints: a flat little-endian float64 blob plus a JSON manifest."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT = "scnfusion-checkpoint/1"


class CheckpointError(ValueError):
    pass


def _arrays(model):
    for name, p in model.named_parameters():
        yield "param", name, p.data
    for name, b in model.named_buffers():
        yield "buffer", name, b


def save_checkpoint(prefix, model, meta=None):
    """Write ``<prefix>.bin`` and ``<prefix>.json``; returns the manifest."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for kind, name, arr in _arrays(model):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "n_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "arrays": entries,
        "meta": meta or {},
    }
    prefix.with_suffix(".bin").write_bytes(blob)
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_checkpoint(prefix, model):
    """Load weights into ``model`` after validating the manifest against it."""
    prefix = Path(prefix)
    try:
        manifest = json.loads(prefix.with_suffix(".json").read_text())
        blob = prefix.with_suffix(".bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint file: {exc.filename}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{prefix}: unknown checkpoint format")
    if len(blob) != manifest["n_bytes"] or hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError(f"{prefix}: checksum mismatch")
    targets = list(_arrays(model))
    if len(targets) != len(manifest["arrays"]):
        raise CheckpointError(f"{prefix}: array count differs from the model")
    for (kind, name, arr), entry in zip(targets, manifest["arrays"]):
        if entry["kind"] != kind or entry["name"] != name or tuple(entry["shape"]) != arr.shape:
            raise CheckpointError(
                f"{prefix}: manifest entry {entry['name']} {entry['shape']} does not match "
                f"model {name} {list(arr.shape)}"
            )
    for (_, _, arr), entry in zip(targets, manifest["arrays"]):
        arr[...] = np.frombuffer(blob, dtype="<f8", count=arr.size, offset=entry["offset"]).reshape(arr.shape)
    return manifest
