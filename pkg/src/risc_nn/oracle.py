"""Untimed golden reference.

``run_functional`` executes a translated Program block by block in a
topological order of each task's activation edges; ``ref_*`` are direct-loop
numerical references.  All arithmetic is 16-bit two's complement with
wrapping (or saturating MUL/MADD when ``accumulate32`` is set), lane order as
in the simulator.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np

from .isa import Opcode, Stage
from .pe import lane_op
from .translator import Descriptor, Program, skip_increments
from .uncore import UnregisteredTable, build_memory


class OracleError(Exception):
    pass


class DataflowViolation(OracleError):
    pass


class ShapeMismatch(OracleError):
    pass


@dataclass
class FunctionalState:
    opm: np.ndarray  # (pes, entries, simd) uint16
    valid: np.ndarray  # (pes, entries) bool
    memory: np.ndarray  # DRAM halfwords
    tables: dict[int, np.ndarray] = field(default_factory=dict)
    dynamic_cal: int = 0
    macs: int = 0


def _cal_sequence(body, desc: Descriptor, bits: list[int] | None):
    a, b = desc.stage_start[1] - desc.iram_start, desc.stage_end[1] - desc.iram_start
    if bits is None:
        return body[a:b]
    incs = skip_increments(bits)
    out = []
    k = next((i for i, v in enumerate(bits) if v), len(bits))
    while k < len(bits):
        out.append(body[a + k])
        k += incs[k]
    return out


def _topo(members: list[Descriptor], rng: random.Random | None) -> list[Descriptor]:
    by_loc = {(d.pe, d.slot): d for d in members}
    indeg = {d.name: 0 for d in members}
    for d in members:
        for s in d.successors:
            indeg[by_loc[s].name] += 1
    for d in members:
        if indeg[d.name] != d.pred_count:
            raise DataflowViolation(f"{d.name}: predecessor count {d.pred_count} != in-degree {indeg[d.name]}")
    ready = [d for d in members if indeg[d.name] == 0]
    order = []
    while ready:
        if rng is not None:
            d = ready.pop(rng.randrange(len(ready)))
        else:
            d = ready.pop(0)
        order.append(d)
        for s in d.successors:
            nxt = by_loc[s]
            indeg[nxt.name] -= 1
            if indeg[nxt.name] == 0:
                ready.append(nxt)
    if len(order) != len(members):
        raise DataflowViolation("activation edges contain a cycle")
    return order


def run_functional(
    program: Program,
    *,
    check_uninit: bool = True,
    seed: int | None = None,
    state: FunctionalState | None = None,
) -> FunctionalState:
    """Execute every task iteration; ``seed`` picks a random valid schedule."""
    cfg = program.cfg
    simd = cfg.simd
    if state is None:
        n_entries = cfg.opm_banks * cfg.opm_entries
        state = FunctionalState(
            opm=np.zeros((cfg.n_pes, n_entries, simd), dtype=np.uint16),
            valid=np.zeros((cfg.n_pes, n_entries), dtype=bool),
            memory=build_memory(program),
            tables={int(k): np.asarray(v, dtype=np.uint16) for k, v in program.tables.items()},
        )
    rng = random.Random(seed) if seed is not None else None
    mem, opm, valid = state.memory, state.opm, state.valid

    def need(pe: int, addr: int, who: str) -> None:
        if check_uninit and not valid[pe, addr]:
            raise DataflowViolation(f"{who}: PE {pe} reads uninitialized Operand RAM entry {addr}")

    for task in program.tasks:
        members = [d for d in program.descriptors if d.task_id == task.task_id]
        if not members:
            continue
        for it in range(task.iterations):
            ld_base = (task.ld_base + it * task.ld_stride) & 0xFFFFFFFF
            st_base = (task.st_base + it * task.st_stride) & 0xFFFFFFFF
            for d in _topo(members, rng):
                body = program.images[d.name]
                pe = d.pe
                off = d.iram_start
                for inst in body[d.stage_start[0] - off : d.stage_end[0] - off]:
                    h = ((ld_base + inst.dram_offset) & 0xFFFFFFFF) >> 1
                    if h + simd > len(mem):
                        raise OracleError(f"{d.name}: LD beyond DRAM image")
                    opm[pe, inst.f0] = mem[h : h + simd]
                    valid[pe, inst.f0] = True
                for inst in _cal_sequence(body, d, program.sparse_bits.get(d.name)):
                    state.dynamic_cal += 1
                    if inst.op in (Opcode.PREREAD0, Opcode.PREREAD1):
                        need(pe, inst.f0 if inst.op is Opcode.PREREAD0 else inst.f1, d.name)
                        continue
                    need(pe, inst.f0, d.name)
                    need(pe, inst.f1, d.name)
                    if inst.op is Opcode.MADD:
                        need(pe, inst.f2, d.name)
                    opm[pe, inst.f2] = lane_op(inst.op, opm[pe, inst.f0], opm[pe, inst.f1], opm[pe, inst.f2], cfg.accumulate32)
                    valid[pe, inst.f2] = True
                    if inst.op in (Opcode.MUL, Opcode.MADD):
                        state.macs += simd
                for inst in body[d.stage_start[2] - off : d.stage_end[2] - off]:
                    need(pe, inst.f0, d.name)
                    opm[inst.f2, inst.f1] = opm[pe, inst.f0]
                    valid[inst.f2, inst.f1] = True
                for inst in body[d.stage_start[3] - off : d.stage_end[3] - off]:
                    need(pe, inst.f0, d.name)
                    vec = opm[pe, inst.f0]
                    if inst.lookup_type:
                        table = state.tables.get(inst.lookup_type)
                        if table is None:
                            raise UnregisteredTable(f"lookup type {inst.lookup_type} has no registered table")
                        vec = table[vec]
                    h = ((st_base + inst.dram_offset) & 0xFFFFFFFF) >> 1
                    mem[h : h + simd] = vec
    return state


# -- numerical references ----------------------------------------------------------


def _wrap(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.int64) & 0xFFFF).astype(np.uint16).view(np.int16)


def ref_conv(weights: np.ndarray, ifmap: np.ndarray, stride: int = 1) -> np.ndarray:
    """weights (K, C, R, S), ifmap (B, C, H, W) -> ofmap (B, K, E, F), int16 wrapping."""
    weights = np.asarray(weights)
    ifmap = np.asarray(ifmap)
    if weights.ndim != 4 or ifmap.ndim != 4:
        raise ShapeMismatch("weights must be (K, C, R, S) and ifmap (B, C, H, W)")
    K, C, R, S = weights.shape
    B, C2, H, W = ifmap.shape
    if C != C2:
        raise ShapeMismatch(f"channel mismatch: filters {C}, ifmap {C2}")
    if H < R or W < S or (H - R) % stride or (W - S) % stride:
        raise ShapeMismatch("filter does not tile the input without padding")
    E, F = (H - R) // stride + 1, (W - S) // stride + 1
    w = weights.astype(np.int64)
    x = ifmap.astype(np.int64)
    out = np.zeros((B, K, E, F), dtype=np.int64)
    for r in range(R):
        for s in range(S):
            patch = x[:, :, r : r + stride * E : stride, s : s + stride * F : stride]  # B C E F
            out += np.einsum("kc,bcef->bkef", w[:, :, r, s], patch)
    return _wrap(out)


def ref_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return _wrap(a.astype(np.int64) @ b.astype(np.int64))


_ELEMENTWISE = {
    "add": lambda x, y: x + y,
    "sub": lambda x, y: x - y,
    "mul": lambda x, y: x * y,
    "max": np.maximum,
    "min": np.minimum,
}


def ref_elementwise(op: str, x: np.ndarray, y: np.ndarray | int) -> np.ndarray:
    x = np.asarray(x).astype(np.int16).astype(np.int64)
    y = np.asarray(y).astype(np.int16).astype(np.int64)
    if y.ndim and x.shape != y.shape:
        raise ShapeMismatch(f"shapes {x.shape} and {y.shape} differ")
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise OracleError(f"unknown elementwise op {op!r}") from None
    return _wrap(fn(x, y))
