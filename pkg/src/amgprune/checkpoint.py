"""amg-ckpt-1 checkpoint container.

Layout: one line of UTF-8 JSON (the header) terminated by ``\\n``, followed by
the raw little-endian float64 payload of every tensor in manifest order.
The header carries the model spec, the original head ids, a tensor
manifest (name, shape, byte offset relative to the payload start, byte
length) and an optional free-form ``meta`` object.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DimensionError
from .tensor import Tensor
from .vit import ModelSpec, VitModel

FORMAT = "amg-ckpt-1"


def dumps(model: VitModel, meta: dict | None = None) -> bytes:
    manifest, blobs, offset = [], [], 0
    for name, t in model.params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": FORMAT,
        "spec": model.spec.to_dict(),
        "head_ids": model.head_ids,
        "tensors": manifest,
        "meta": meta or {},
    }
    line = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return line + b"\n" + b"".join(blobs)


def loads(buf: bytes) -> tuple[VitModel, dict]:
    nl = buf.find(b"\n")
    if nl < 0:
        raise CheckpointError("missing header line")
    try:
        header = json.loads(buf[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    if header.get("format") != FORMAT:
        raise CheckpointError(f"unsupported format {header.get('format')!r}, expected {FORMAT!r}")
    spec = ModelSpec.from_dict(header["spec"])
    payload = memoryview(buf)[nl + 1:]
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        start, n = entry["offset"], entry["nbytes"]
        if n != 8 * int(np.prod(shape, dtype=np.int64)) or start + n > len(payload):
            raise CheckpointError(f"{entry['name']}: manifest entry inconsistent with payload")
        arr = np.frombuffer(payload[start:start + n], dtype="<f8").astype(np.float64).reshape(shape)
        params[entry["name"]] = Tensor(arr, requires_grad=True, name=entry["name"])
    try:
        model = VitModel(spec, params, header.get("head_ids"))
    except DimensionError as exc:
        raise CheckpointError(f"tensor manifest does not match spec: {exc}") from exc
    return model, header.get("meta", {})


def save(model: VitModel, path, meta: dict | None = None) -> str:
    """Write the checkpoint and return the sha256 of its bytes."""
    data = dumps(model, meta)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> tuple[VitModel, dict]:
    return loads(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
