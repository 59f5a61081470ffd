"""Deterministic seed derivation for nested RNG streams."""

from __future__ import annotations

import hashlib


def derive_seed(*parts: int) -> int:
    """Hash a tuple of integers into a stable 64-bit seed.

    Used wherever a child stream (per scene, per stochastic pass, per
    condition) must be reproducible from a parent seed without the streams
    overlapping. Stable across processes and platforms, unlike ``hash()``.
    """
    digest = hashlib.blake2b(
        b"\x00".join(str(int(p)).encode() for p in parts), digest_size=8
    )
    return int.from_bytes(digest.digest(), "little")
