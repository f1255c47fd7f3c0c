"""Pure-numpy fallback for the compiled kernels in ``_core.pyx``."""

from __future__ import annotations

import numpy as np

_ADD, _SUB, _MUL, _MAX, _MIN, _MADD = 1, 2, 3, 4, 5, 6


def _sat(v: np.ndarray) -> np.ndarray:
    return np.clip(v, -32768, 32767).astype(np.int16).view(np.uint16)


def cal_exec(opm, ops, f0, f1, f2, acc32: bool = False) -> int:
    """Run CAL instructions in order on ``opm``; returns the number of lane MACs."""
    lanes = opm.shape[1]
    signed = opm.view(np.int16)
    macs = 0
    for op, a, b, c in zip(ops.tolist(), f0.tolist(), f1.tolist(), f2.tolist()):
        if not _ADD <= op <= _MADD:
            continue
        x = signed[a].astype(np.int32)
        y = signed[b].astype(np.int32)
        if op == _ADD:
            r = x + y
        elif op == _SUB:
            r = x - y
        elif op == _MUL:
            r = x * y
        elif op == _MAX:
            r = np.maximum(x, y)
        elif op == _MIN:
            r = np.minimum(x, y)
        else:
            r = x * y + signed[c].astype(np.int32)
        if acc32 and op in (_MUL, _MADD):
            opm[c] = _sat(r)
        else:
            opm[c] = (r & 0xFFFF).astype(np.uint16)
        if op in (_MUL, _MADD):
            macs += lanes
    return macs
