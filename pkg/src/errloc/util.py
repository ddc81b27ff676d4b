"""Seed derivation and small file helpers shared across the package."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One step of the splitmix64 mixing function (64-bit state in, 64-bit out)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def derive_seed(master: int, *parts: int | str) -> int:
    """Derive a reproducible 63-bit sub-seed from a master seed and a tag path.

    Every component (split index, strategy name, ...) folds into a splitmix64
    chain, so the same (master, parts) always yields the same seed while
    different tag paths are statistically independent.  String parts are
    hashed with blake2b so the result does not depend on PYTHONHASHSEED.
    """
    state = splitmix64(master & _MASK64)
    for part in parts:
        if isinstance(part, int):
            token = part & _MASK64
        else:
            digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=8).digest()
            token = int.from_bytes(digest, "big")
        state = splitmix64(state ^ token)
    # numpy seeds must be non-negative; drop the sign bit.
    return state >> 1


def atomic_write_text(path: str, text: str) -> None:
    """Write text to path via a temp file in the same directory plus rename.

    Readers never observe a partially written file.
    """
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: str, obj) -> None:
    """Serialize obj deterministically (sorted keys) and write atomically."""
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
