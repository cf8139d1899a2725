"""Checkpoint container: JSON with decimal-text tensors.

Every tensor element is written as decimal text with 17 significant digits,
which round-trips 64-bit floats exactly, in row-major order.  The same
canonical text feeds :func:`tensor_digest`, so equality of digests means
equality of serialized bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError

Array = np.ndarray

CHECKPOINT_FORMAT = "hra-lab-ckpt-v1"


def format_float(x: float) -> str:
    return f"{float(x):.17g}"


def tensor_to_json(arr: Array) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape),
            "data": [format_float(x) for x in arr.reshape(-1)]}


def tensor_from_json(obj: dict) -> Array:
    shape = tuple(int(s) for s in obj["shape"])
    data = np.array([float(s) for s in obj["data"]], dtype=np.float64)
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise ConfigError(f"tensor data length {data.size} does not match shape {shape}")
    return data.reshape(shape)


def save_checkpoint(path, tensors: dict[str, Array], meta: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "tensors": {name: tensor_to_json(arr) for name, arr in sorted(tensors.items())},
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict[str, Array], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format: {doc.get('format')!r}")
    tensors = {name: tensor_from_json(obj) for name, obj in doc["tensors"].items()}
    return tensors, doc.get("meta", {})


def tensor_digest(tensors: dict[str, Array], prefix: str | None = None) -> str:
    """SHA-256 over names, shapes, and canonical element text (sorted names).

    ``prefix`` restricts the digest to names containing that path segment,
    e.g. ``"controller/"`` to fingerprint only controller weights.
    """
    h = hashlib.sha256()
    for name in sorted(tensors):
        if prefix is not None and prefix not in name:
            continue
        arr = np.asarray(tensors[name], dtype=np.float64)
        h.update(name.encode("utf-8"))
        h.update(repr(arr.shape).encode("ascii"))
        h.update(",".join(format_float(x) for x in arr.reshape(-1)).encode("ascii"))
    return h.hexdigest()
