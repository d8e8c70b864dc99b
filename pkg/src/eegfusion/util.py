"""Canonical JSON hashing and atomic file writes."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

__all__ = ["canonical_json", "config_hash", "atomic_write_text"]


def canonical_json(obj) -> str:
    """Key-sorted, whitespace-free JSON so equal configs hash equally."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def atomic_write_text(path, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see a
    partially written file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
