"""Checkpoint file format ``mplite-ckpt-v1`` and atomic file writes.

A checkpoint is a JSON object::

    {"format": "mplite-ckpt-v1", "kind": ..., "meta": {...},
     "weights": {name: {"shape": [...], "data": <base64 of little-endian f8>}}}

Keys are sorted and no timestamps are stored, so identical content gives
identical bytes.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT = "mplite-ckpt-v1"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    try:
        raw = base64.b64decode(d["data"], validate=True)
        shape = tuple(int(s) for s in d["shape"])
    except (KeyError, TypeError, ValueError, binascii.Error) as exc:
        raise CheckpointError(f"malformed weight entry: {exc}") from None
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise CheckpointError(f"weight payload has {len(raw)} bytes, shape {shape} needs {expected}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def to_bytes(kind: str, meta: dict, weights: dict[str, np.ndarray]) -> bytes:
    doc = {"format": FORMAT, "kind": kind, "meta": meta,
           "weights": {k: encode_array(v) for k, v in weights.items()}}
    return dump_json(doc).encode("utf-8")


def from_bytes(data: bytes, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError(f"not an {FORMAT} checkpoint")
    if doc.get("kind") != kind:
        raise CheckpointError(f"checkpoint kind is {doc.get('kind')!r}, expected {kind!r}")
    weights = {k: decode_array(v) for k, v in doc.get("weights", {}).items()}
    return doc.get("meta", {}), weights


def save(path, kind: str, meta: dict, weights: dict[str, np.ndarray]) -> bytes:
    data = to_bytes(kind, meta, weights)
    atomic_write_bytes(path, data)
    return data


def load(path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    return from_bytes(path.read_bytes(), kind)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
