"""Canonical JSON serialization, digests, and seed derivation.

Every file the framework writes (hierarchy documents, cassettes, transcripts,
reports, dataset records) goes through ``dumps`` so that re-serialization is
byte-stable: sorted keys, no insignificant whitespace, no NaN/Infinity.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any


def dumps(value: Any) -> str:
    """Serialize ``value`` as canonical JSON (sorted keys, compact separators)."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def loads(text: str) -> Any:
    return json.loads(text)


def digest(value: Any) -> str:
    """Hex SHA-256 of the canonical serialization of ``value``."""
    return hashlib.sha256(dumps(value).encode("utf-8")).hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def derive_seed(root_seed: int, *labels: str | int) -> int:
    """Derive a child seed from a root seed and a label path.

    Used for per-forest seeds (``derive_seed(seed, "forest", artifact_id)``).
    Stable across platforms and runs: SHA-256 over the joined path, folded to
    63 bits so it fits any RNG that expects a non-negative int.
    """
    material = ":".join([str(root_seed), *[str(part) for part in labels]])
    raw = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(raw[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF
