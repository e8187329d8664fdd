"""Deterministic sub-seed derivation.

All randomness in the package flows from one user seed. Components derive
their own streams via ``derive_seed(seed, label)``: the first 8 bytes of
sha256(f"{seed}:{label}") read little-endian. Stable across platforms and
process boundaries, so parallel and serial runs agree.
"""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
