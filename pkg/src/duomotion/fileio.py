"""Deterministic JSON helpers shared by every file format in the pipeline.

All documents embed ``schema_version`` and, where a pipeline config is in
play, ``config_hash``.  Serialization is byte-stable: explicit key order,
fixed separators, shortest round-trip float repr (CPython's json default).
Dense arrays in checkpoints are base64-encoded little-endian float64.
"""

from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path

import numpy as np


class SchemaError(ValueError):
    """Missing or mismatched schema version in a document."""


def dumps_stable(doc) -> str:
    return json.dumps(doc, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def write_json(path, doc) -> None:
    Path(path).write_text(dumps_stable(doc), encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def check_schema(doc, expected: int, what: str):
    if doc.get("schema_version") != expected:
        raise SchemaError(
            f"{what}: schema_version {doc.get('schema_version')!r}, expected {expected}")


def sha256_of(doc) -> str:
    canonical = json.dumps(doc, ensure_ascii=False, separators=(",", ":"),
                           sort_keys=True, allow_nan=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(arr.shape),
        "dtype": "float64",
        "data": base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii"),
    }


def decode_array(doc: dict) -> np.ndarray:
    if doc.get("dtype") != "float64":
        raise SchemaError(f"unsupported array dtype {doc.get('dtype')!r}")
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(doc["shape"]).astype(np.float64)
