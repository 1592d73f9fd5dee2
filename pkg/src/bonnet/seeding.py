"""Stable seed derivation: one run seed fans out to every random decision."""

import hashlib


def stable_seed(*parts) -> int:
    """64-bit seed from arbitrary parts; stable across runs and platforms."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
