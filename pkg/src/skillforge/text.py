"""Tokenisation, word 3-gram shingles and the shared text similarity scorers."""
from __future__ import annotations

import hashlib
import re
from array import array

from . import kernels

_WORD_RE = re.compile(r"[a-z0-9_]+")
_TOOL_RE = re.compile(r"\b([A-Za-z][A-Za-z0-9_]*)\(")

NGRAM = 3
EMBED_DIM = 256


def words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def shingles(text: str, n: int = NGRAM) -> list[str]:
    """Contiguous word n-grams; a text shorter than ``n`` words is one shingle."""
    toks = words(text)
    if not toks:
        return []
    if len(toks) < n:
        return [" ".join(toks)]
    return [" ".join(toks[i : i + n]) for i in range(len(toks) - n + 1)]


def shingle_fps(text: str) -> array:
    return kernels.fingerprints(shingles(text))


def jaccard(a: str, b: str) -> float:
    """Jaccard similarity of the two texts' word 3-gram sets."""
    return kernels.jaccard_sorted(shingle_fps(a), shingle_fps(b))


def cosine(a, b) -> float:
    # inputs are unit-norm or all-zero, so the dot product is the cosine
    return kernels.dot(a, b)


def tool_names(text: str) -> set[str]:
    return set(_TOOL_RE.findall(text))


def truncate(text: str, limit: int) -> str:
    if len(text) <= limit:
        return text
    return text[:limit]


def digest(text: str, n: int = 16) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:n]
