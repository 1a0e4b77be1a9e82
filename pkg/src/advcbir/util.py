"""Small shared helpers: deterministic rounding and seed derivation."""

import hashlib

import numpy as np


def round_half_away(x):
    """Round half away from zero (round(2.5) == 3, round(-2.5) == -3).

    numpy's default rounds half to even; every rounding step in this package
    goes through here so results are bit-reproducible across platforms.
    """
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def derive_seed(base_seed: int, *tokens) -> int:
    """Derive a stable 63-bit sub-seed from a base seed and string tokens.

    Uses sha256 rather than hash() so the result does not depend on
    PYTHONHASHSEED or the interpreter version.
    """
    h = hashlib.sha256()
    h.update(str(int(base_seed)).encode())
    for t in tokens:
        h.update(b"/")
        h.update(str(t).encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFFFFFFFFFFFFFF
