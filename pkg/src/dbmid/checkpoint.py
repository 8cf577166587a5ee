"""Checkpoint container.

Layout: ``b"DBMID1"``, a little-endian uint32 manifest length, the UTF-8 JSON
manifest, then every tensor as little-endian float32 in manifest order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"DBMID1"
FORMAT_VERSION = 1


def _architectures():
    from .blur_classifier import BlurClassifierNet, ClassifierConfig
    from .deblur_net import DeblurNet, NetworkConfig
    return {
        "deblur": (DeblurNet, NetworkConfig),
        "classifier": (BlurClassifierNet, ClassifierConfig),
    }


def _arch_name(model) -> str:
    for name, (cls, _) in _architectures().items():
        if isinstance(model, cls):
            return name
    raise CheckpointError(f"cannot checkpoint object of type {type(model).__name__}")


def to_bytes(model) -> bytes:
    arch = _arch_name(model)
    tensors = []
    offset = 0
    blobs = []
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "architecture": arch,
        "role": model.role,
        "config": vars(model.config),
        "tensors": tensors,
        "data_bytes": offset,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)


def from_bytes(data: bytes):
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a DBMID checkpoint (magic mismatch)")
    (length,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    if start + length > len(data):
        raise CheckpointError("truncated checkpoint manifest")
    try:
        manifest = json.loads(data[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')!r}")
    archs = _architectures()
    if manifest.get("architecture") not in archs:
        raise CheckpointError(f"unknown architecture {manifest.get('architecture')!r}")
    model_cls, config_cls = archs[manifest["architecture"]]
    try:
        model = model_cls(config_cls(**manifest["config"]), manifest["role"])
    except Exception as exc:
        raise CheckpointError(f"invalid checkpoint config: {exc}") from None
    body = data[start + length:]
    if len(body) != manifest["data_bytes"]:
        raise CheckpointError(f"checkpoint data is {len(body)} bytes, expected {manifest['data_bytes']}")
    expected = model.state_dict()
    if [t["name"] for t in manifest["tensors"]] != list(expected):
        raise CheckpointError("tensor names do not match the architecture")
    state = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        if shape != tuple(expected[entry["name"]].shape):
            raise CheckpointError(f"shape mismatch for {entry['name']}: {shape}")
        count = int(np.prod(shape))
        end = entry["offset"] + 4 * count
        if end > len(body):
            raise CheckpointError(f"truncated tensor data for {entry['name']}")
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=entry["offset"]).reshape(shape)
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    model.eval()
    return model


def save_checkpoint(model, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load_checkpoint(path, role: str | None = None):
    """Load a model; ``role`` (if given) must match the stored role tag."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    model = from_bytes(data)
    if role is not None and model.role != role:
        raise CheckpointError(f"{path}: expected a {role!r} model, found {model.role!r}")
    return model
