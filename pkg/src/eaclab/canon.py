"""Canonical JSON serialization and content hashing.

Every on-disk artifact (specs, plans, snapshots, log lines) goes through
these helpers so that equal values always serialize to identical bytes.
"""

from __future__ import annotations

import hashlib
import json


def canonical_json(obj: object) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def canonical_bytes(obj: object) -> bytes:
    return canonical_json(obj).encode("utf-8")


def sha256_hex(obj: object) -> str:
    return hashlib.sha256(canonical_bytes(obj)).hexdigest()
