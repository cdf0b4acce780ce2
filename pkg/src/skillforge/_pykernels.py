"""Pure-Python similarity kernels.

Bit-for-bit twin of ``_kernels.pyx``: every float is produced by the same
sequence of IEEE double operations, so either backend yields identical
graphs, rankings and repository checksums.
"""
from __future__ import annotations

import math
from array import array
from typing import Iterable, Sequence

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF

BACKEND = "python"


def fingerprint(text: str) -> int:
    """64-bit FNV-1a over the UTF-8 bytes of ``text``."""
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def fingerprints(shingles: Iterable[str]) -> array:
    """Sorted, de-duplicated fingerprints of ``shingles``."""
    return array("Q", sorted({fingerprint(s) for s in shingles}))


def jaccard_sorted(a: Sequence[int], b: Sequence[int]) -> float:
    na, nb = len(a), len(b)
    if na == 0 and nb == 0:
        return 0.0
    i = j = inter = 0
    while i < na and j < nb:
        x, y = a[i], b[j]
        if x == y:
            inter += 1
            i += 1
            j += 1
        elif x < y:
            i += 1
        else:
            j += 1
    union = na + nb - inter
    return inter / union


def hashed_embedding(shingles: Iterable[str], dim: int) -> array:
    """Signed feature hashing, L2-normalised; empty input gives zeros."""
    acc = [0.0] * dim
    for s in shingles:
        h = fingerprint(s)
        idx = h % dim
        if (h >> 32) & 1:
            acc[idx] -= 1.0
        else:
            acc[idx] += 1.0
    sq = 0.0
    for v in acc:
        sq += v * v
    if sq == 0.0:
        return array("d", acc)
    norm = math.sqrt(sq)
    return array("d", [v / norm for v in acc])


def dot(a: Sequence[float], b: Sequence[float]) -> float:
    s = 0.0
    for i in range(len(a)):
        s += a[i] * b[i]
    return s


def pair_weight(
    fa: Sequence[int],
    fb: Sequence[int],
    ea: Sequence[float],
    eb: Sequence[float],
    ra: Sequence[int],
    rb: Sequence[int],
    alpha: float,
    beta: float,
    gamma: float,
    err_weight: float,
) -> float:
    sparse = jaccard_sorted(fa, fb)
    emb = dot(ea, eb)
    if emb < 0.0:
        emb = 0.0
    if len(ra) == 0 and len(rb) == 0:
        err = 0.0
    else:
        err = err_weight * jaccard_sorted(ra, rb)
        if err > 1.0:
            err = 1.0
    return alpha * sparse + beta * emb + gamma * err


def weights_against(
    fa: Sequence[int],
    ea: Sequence[float],
    ra: Sequence[int],
    others: Sequence[tuple],
    alpha: float,
    beta: float,
    gamma: float,
    err_weight: float,
) -> list[float]:
    """Weights from one node to each ``(fingerprints, embedding, err_fps)``."""
    return [
        pair_weight(fa, fb, ea, eb, ra, rb, alpha, beta, gamma, err_weight)
        for fb, eb, rb in others
    ]
