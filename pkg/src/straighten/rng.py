"""Seeded random streams.

All randomness is drawn from PCG64 generators built from a
``SeedSequence`` whose entropy is ``(seed, purpose, *indices)``. The
purpose string is folded to a stable 32-bit integer with CRC32, so a
stream depends only on its name and indices, never on the order in which
streams are requested. This makes per-sample generation order-free:
parallel and serial rendering produce identical bytes.
"""
import zlib

import numpy as np


def purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Independent generator for ``(seed, purpose, indices)``."""
    entropy = [int(seed) & 0xFFFFFFFF, int(seed) >> 32, purpose_code(purpose)]
    entropy.extend(int(i) for i in indices)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
