"""
Versioned model artifacts as deterministic JSON.

Arrays are stored as ``{"__ndarray__": {"dtype", "shape", "data"}}`` with
little-endian base64 data, keys are sorted, and no timestamps are written,
so retraining with the same config and seed reproduces the file byte for
byte.
"""
from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DataError

FORMAT = "direct-model"
VERSION = 1
_TAG = "__ndarray__"


def _encode(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        a = np.ascontiguousarray(obj)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        return {_TAG: {"dtype": a.dtype.str, "shape": list(a.shape),
                       "data": base64.b64encode(a.tobytes()).decode("ascii")}}
    if isinstance(obj, dict):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _decode(obj: Any) -> Any:
    if isinstance(obj, dict):
        if set(obj) == {_TAG}:
            enc = obj[_TAG]
            raw = base64.b64decode(enc["data"])
            return np.frombuffer(raw, dtype=np.dtype(enc["dtype"])).reshape(
                enc["shape"]).copy()
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


def dumps(payload: dict) -> str:
    body = {"format": FORMAT, "version": VERSION, **_encode(payload)}
    return json.dumps(body, sort_keys=True, indent=1, allow_nan=True) + "\n"


def loads(text: str) -> dict:
    try:
        body = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataError(f"artifact is not valid JSON: {e}") from None
    if not isinstance(body, dict) or body.get("format") != FORMAT:
        raise DataError("not a model artifact")
    if body.get("version") != VERSION:
        raise DataError(f"unsupported artifact version {body.get('version')!r}")
    try:
        return _decode(body)
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"corrupt array in artifact: {e}") from None


def save(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(payload), encoding="utf-8")
    return path


def load(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such artifact: {path}")
    return loads(path.read_text(encoding="utf-8"))
