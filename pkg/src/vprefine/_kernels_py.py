"""Pure-Python kernels; the arithmetic order mirrors _kernels.pyx exactly."""

from __future__ import annotations

import math
from array import array

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK
    return h


def hash_embed(tokens: list, dims: int) -> array:
    v = array("d", bytes(8 * dims))
    for tok in tokens:
        h = fnv1a64(tok)
        if (h >> 8) & 1:
            v[h % dims] -= 1.0
        else:
            v[h % dims] += 1.0
    norm = 0.0
    for i in range(dims):
        norm += v[i] * v[i]
    if norm > 0.0:
        norm = math.sqrt(norm)
        for i in range(dims):
            v[i] = v[i] / norm
    return v


def dot_rows(query, matrix, n: int) -> array:
    dims = len(query)
    out = array("d", bytes(8 * n))
    for r in range(n):
        s = 0.0
        off = r * dims
        for i in range(dims):
            s = s + query[i] * matrix[off + i]
        out[r] = s
    return out
