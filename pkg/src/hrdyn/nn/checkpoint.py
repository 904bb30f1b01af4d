"""Self-describing JSON checkpoints.

Layout::

    {"format_version": 1,
     "config": {...},
     "tensors": {"name": {"shape": [...], "data": [...]}, ...},
     "optimizer": {...} | null,
     "extra": {...}}

Floats are written with ``repr`` precision, so a save/load round trip is
bit-exact.
"""

import json

import numpy as np

from ..exceptions import ParseError

FORMAT_VERSION = 1


def tensor_to_json(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def tensor_from_json(t):
    data = np.asarray(t["data"], dtype=np.float64)
    shape = tuple(t["shape"])
    if data.size != int(np.prod(shape)):
        raise ParseError(f"tensor data length {data.size} does not match shape {shape}")
    return data.reshape(shape)


def save_checkpoint(path, config, tensors, optimizer=None, extra=None):
    doc = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "tensors": {name: tensor_to_json(t) for name, t in tensors.items()},
        "optimizer": optimizer,
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Return ``(config, tensors, optimizer, extra)``."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid checkpoint JSON: {exc.msg}", path, exc.lineno) from exc
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint format_version {version!r}", path)
    tensors = {name: tensor_from_json(t) for name, t in doc["tensors"].items()}
    return doc["config"], tensors, doc.get("optimizer"), doc.get("extra", {})
