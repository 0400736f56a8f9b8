"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy fallback in ``_pykernels``.  Set ``CONCEPTMOE_PURE_PYTHON=1`` to force
the fallback.
"""

from __future__ import annotations

import os

from . import _pykernels

python_backend = _pykernels
compiled_backend = None

if os.environ.get("CONCEPTMOE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend  # type: ignore[no-redef]
    except ImportError:  # extension not built
        compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND_NAME = "compiled" if backend is compiled_backend else "python"

count_pairs = backend.count_pairs
merge_pair = backend.merge_pair
MergeTable = backend.MergeTable
topk_indices = backend.topk_indices
SEP = _pykernels.SEP
