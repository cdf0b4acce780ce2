"""Select the similarity kernel backend at import time.

The compiled extension is used when it was built; set
``SKILLFORGE_PURE_PYTHON=1`` to force the pure-Python fallback.
"""
from __future__ import annotations

import os

if os.environ.get("SKILLFORGE_PURE_PYTHON") == "1":
    from . import _pykernels as _impl
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _pykernels as _impl

BACKEND: str = _impl.BACKEND
fingerprint = _impl.fingerprint
fingerprints = _impl.fingerprints
jaccard_sorted = _impl.jaccard_sorted
hashed_embedding = _impl.hashed_embedding
dot = _impl.dot
pair_weight = _impl.pair_weight
weights_against = _impl.weights_against

__all__ = [
    "BACKEND",
    "fingerprint",
    "fingerprints",
    "jaccard_sorted",
    "hashed_embedding",
    "dot",
    "pair_weight",
    "weights_against",
]
