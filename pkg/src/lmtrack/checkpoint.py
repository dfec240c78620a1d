"""JSON checkpoints: parameter path -> {shape, base64 little-endian float64}."""

from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path

import numpy as np

from .gradtensor import Tensor


class ConfigHashMismatch(ValueError):
    pass


def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_array(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])


def dumps(params: dict, meta: dict) -> str:
    body = {
        "meta": meta,
        "params": {k: encode_array(params[k].data if isinstance(params[k], Tensor) else params[k])
                   for k in sorted(params)},
    }
    return json.dumps(body, sort_keys=True)


def save(path, params: dict, meta: dict) -> str:
    """Write the checkpoint and return its sha256."""
    text = dumps(params, meta)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load(path) -> tuple[dict, dict]:
    body = json.loads(Path(path).read_text())
    return {k: decode_array(v) for k, v in body["params"].items()}, body["meta"]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def assign(params: dict, arrays: dict, strict: bool = True):
    """Copy loaded arrays into live parameters."""
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if strict and (missing or extra):
        raise KeyError(f"checkpoint mismatch: missing={missing[:5]} extra={extra[:5]}")
    for key, p in params.items():
        if key in arrays:
            if arrays[key].shape != p.data.shape:
                raise ValueError(f"{key}: checkpoint shape {arrays[key].shape} != {p.data.shape}")
            p.data = arrays[key].copy()
