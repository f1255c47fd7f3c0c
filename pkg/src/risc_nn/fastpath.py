"""Selects the compiled kernel core when available, else the numpy fallback.

Set ``RISC_NN_PURE=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _core_py

BACKEND = "python"
cal_exec = _core_py.cal_exec

if not os.environ.get("RISC_NN_PURE"):
    try:
        from . import _core  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        pass
    else:
        cal_exec = _core.cal_exec
        BACKEND = "cython"
