"""Deterministic serialization helpers shared by datasets, checkpoints, reports.

Every artifact this package writes must be byte-identical across reruns with
the same configuration and seed, so JSON is always rendered with sorted keys
and compact separators, floats rely on Python's shortest-roundtrip repr, and
nothing here ever embeds a timestamp or an absolute path.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

__all__ = ["canonical_json", "config_hash", "write_text", "sha256_file"]


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
