# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: sequential CAL execution over SIMD lanes."""

from libc.stdint cimport int16_t, int32_t, int64_t, uint16_t

cdef int OP_ADD = 1, OP_SUB = 2, OP_MUL = 3, OP_MAX = 4, OP_MIN = 5, OP_MADD = 6


cdef inline uint16_t _sat(int64_t v):
    if v > 32767:
        v = 32767
    elif v < -32768:
        v = -32768
    return <uint16_t>(<int16_t>v)


def cal_exec(uint16_t[:, ::1] opm, int32_t[::1] ops, int32_t[::1] f0, int32_t[::1] f1,
             int32_t[::1] f2, bint acc32=False):
    """Run CAL instructions in order on ``opm``; returns the number of lane MACs.

    PREREAD opcodes are skipped: in sequential order they carry no state."""
    cdef Py_ssize_t n = ops.shape[0], lanes = opm.shape[1], i, l
    cdef int op, a, b, c
    cdef int16_t x, y
    cdef int64_t macs = 0
    for i in range(n):
        op = ops[i]
        if op < OP_ADD or op > OP_MADD:
            continue
        a = f0[i]
        b = f1[i]
        c = f2[i]
        for l in range(lanes):
            x = <int16_t>opm[a, l]
            y = <int16_t>opm[b, l]
            if op == OP_ADD:
                opm[c, l] = <uint16_t>(x + y)
            elif op == OP_SUB:
                opm[c, l] = <uint16_t>(x - y)
            elif op == OP_MUL:
                if acc32:
                    opm[c, l] = _sat(<int32_t>x * <int32_t>y)
                else:
                    opm[c, l] = <uint16_t>(<int32_t>x * <int32_t>y)
            elif op == OP_MAX:
                opm[c, l] = <uint16_t>(x if x >= y else y)
            elif op == OP_MIN:
                opm[c, l] = <uint16_t>(x if x <= y else y)
            else:
                if acc32:
                    opm[c, l] = _sat(<int32_t>x * <int32_t>y + <int16_t>opm[c, l])
                else:
                    opm[c, l] = <uint16_t>(<int32_t>x * <int32_t>y + <int16_t>opm[c, l])
        if op == OP_MUL or op == OP_MADD:
            macs += lanes
    return macs
