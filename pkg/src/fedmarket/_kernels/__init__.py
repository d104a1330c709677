"""Kernel backend selection.

The package ships two implementations of the per-batch training kernels: a
compiled Cython extension (``_ck``) and a NumPy fallback (``_np``). One is
picked here, once, at import time; everything downstream calls through the
names re-exported below, so a process never mixes backends.

Selection is controlled by the ``FEDMARKET_KERNELS`` environment variable:

* ``auto`` (default) — compiled extension if importable, else NumPy;
* ``cython`` — require the extension, raise if missing;
* ``python`` — force the NumPy fallback.
"""
from __future__ import annotations

import os

_choice = os.environ.get("FEDMARKET_KERNELS", "auto")
if _choice not in ("auto", "cython", "python"):
    raise RuntimeError(
        f"FEDMARKET_KERNELS must be auto, cython or python; got {_choice!r}"
    )

if _choice == "python":
    from . import _np as _impl

    BACKEND = "python"
else:
    try:
        from . import _ck as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        if _choice == "cython":
            raise
        from . import _np as _impl  # type: ignore[no-redef]

        BACKEND = "python"

TEACHER_PROB_FLOOR = _impl.TEACHER_PROB_FLOOR
softmax_rows = _impl.softmax_rows
ce_loss_grad = _impl.ce_loss_grad
kl_loss_grad = _impl.kl_loss_grad
ensemble_probs = _impl.ensemble_probs
sgd_update = _impl.sgd_update
adam_update = _impl.adam_update

__all__ = [
    "BACKEND",
    "TEACHER_PROB_FLOOR",
    "softmax_rows",
    "ce_loss_grad",
    "kl_loss_grad",
    "ensemble_probs",
    "sgd_update",
    "adam_update",
]
