"""Small shared helpers: seed derivation and worker-count policy."""

from __future__ import annotations

import hashlib
import os


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from a tuple of identifiers.

    Hash-based so parallel generation order can never influence a sample's
    randomness; unlike Python's hash() this is stable across processes.
    """
    text = "/".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def num_workers() -> int:
    """Data-loading/generation parallelism cap (SHAPELOCK_NUM_WORKERS, default 1)."""
    try:
        return max(1, int(os.environ.get("SHAPELOCK_NUM_WORKERS", "1")))
    except ValueError:
        return 1
