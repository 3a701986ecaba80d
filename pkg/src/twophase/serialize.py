"""Deterministic JSON/CSV output helpers.

All artifacts must be byte-identical across reruns with the same config and
seed, so serialization uses sorted keys, no timestamps, and repr-exact floats.
"""

from __future__ import annotations

import hashlib
import json
from importlib import metadata

FLOAT_FMT = "%.17g"


def tool_version() -> str:
    try:
        return metadata.version("twophase")
    except metadata.PackageNotFoundError:  # pragma: no cover - dev checkouts
        return "0.0.0+local"


def config_hash(raw_bytes: bytes) -> str:
    return hashlib.sha256(raw_bytes).hexdigest()[:16]


def _sanitize(obj):
    """Replace non-finite floats with None so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, float) and (obj != obj or obj in (float("inf"), float("-inf"))):
        return None
    return obj


def dump_json(obj, path, *, meta: dict | None = None) -> None:
    payload = dict(obj)
    if meta:
        payload["meta"] = dict(sorted(meta.items()))
    with open(path, "w") as fh:
        json.dump(_sanitize(payload), fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def load_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
