"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy implementation in ``_fallback`` takes over. Setting
``CKKSFED_BACKEND=numpy`` forces the fallback, ``CKKSFED_BACKEND=cython``
makes a missing extension an import error.
"""

from __future__ import annotations

import os

from . import _fallback

fallback = _fallback

_choice = os.environ.get("CKKSFED_BACKEND", "").strip().lower()

if _choice == "numpy":
    kernels = _fallback
    compiled = None
else:
    try:
        from . import _kernels as compiled
    except ImportError:
        if _choice == "cython":
            raise
        compiled = None
        kernels = _fallback
    else:
        kernels = compiled

NAME = kernels.NAME
