"""Seed derivation shared by harvesting and dataset rendering.

``derive_seed(*parts)`` is the first 8 bytes (little-endian) of
``blake2b("\\x1f".join(str(p) for p in parts), digest_size=8)``.  Parts are
joined with the ASCII unit separator, so ``("a", "bc")`` and ``("ab", "c")``
never collide structurally.
"""

from __future__ import annotations

import hashlib

_SEP = "\x1f"


def derive_seed(*parts) -> int:
    text = _SEP.join(str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")
