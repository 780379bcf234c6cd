"""Small shared helpers: seed derivation and atomic JSON output."""

from __future__ import annotations

import hashlib
import json
import os


def derive_seed(*parts) -> int:
    """Fold arbitrary labels into a 64-bit seed, stable across processes.

    Python's builtin hash() is salted per process, which would break the
    simulation/TCP equivalence, so this goes through sha256.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def atomic_write_json(path: str, obj) -> None:
    """Write JSON via a temp file + rename so readers never see a torn file."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")
    os.replace(tmp, path)


def append_jsonl(fh, obj) -> None:
    fh.write(json.dumps(obj, sort_keys=False) + "\n")
    fh.flush()
