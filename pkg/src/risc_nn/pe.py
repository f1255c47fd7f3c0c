"""Cycle-level model of one PE.

The Control Unit keeps one ``Block`` record per ExeBlock slot and walks it
through the lifecycle (Init, instruction load, sparse update, task enable,
activation, LD/CAL/FLOW/ST execution, reset).  Four execution units each run
one block's stage to completion; different blocks occupy different units at
the same time.

Per-cycle resource rules:

* Instruction RAM: one access per bank per cycle.  Priority CAL fetch, then the
  loader, then LD, FLOW, ST fetches.
* Operand RAM: one read and one write per bank per cycle.  CAL ports 0-2 and
  the CAL writeback always win; FLOW then ST reads, and inbound writes (LD
  responses, COPY data) wait for a free port.

The CAL unit has two interchangeable models: ``bulk`` executes the whole stage
with the compiled kernel at grant time and replays its bank usage cycle by
cycle; ``cycle`` steps ``CalPipeline`` every cycle.  Both have identical timing
and, for race-free programs, identical results.
"""

from __future__ import annotations

import dataclasses
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import TYPE_CHECKING

import numpy as np

from . import fastpath
from .isa import CAL_ARITH, Instruction, Opcode, decode
from .translator import Descriptor, assemble_descriptor, decode_enable, decode_fragment, decode_sparse_chunk, read_ports

if TYPE_CHECKING:
    from .uncore import Engine

N_FRAGS = 5
CAL_LATENCY = 3  # cycles from the last FETCH to its WRITEBACK


class PeError(Exception):
    pass


class SlotOverflow(PeError):
    pass


class VectorLengthMismatch(PeError):
    pass


class PortConflict(AssertionError):
    """A CAL instruction needs two RAM reads from one bank in one cycle."""


class State(IntEnum):
    UNINIT = 0
    INITIALIZED = 1
    LOADING = 2
    LOADED = 3
    SPARSE_UPDATING = 4
    READY = 5


class Progress(IntEnum):
    NONE = 0
    LD_RUNNING = 1
    LD_DONE = 2
    CAL_RUNNING = 3
    CAL_DONE = 4
    FLOW_RUNNING = 5
    FLOW_DONE = 6
    ST_RUNNING = 7
    DONE = 8


# -- lane arithmetic -------------------------------------------------------------


def lane_op(op: Opcode, a: np.ndarray, b: np.ndarray, c: np.ndarray, acc32: bool = False) -> np.ndarray:
    """One SIMD CAL operation on uint16 lane vectors (16-bit two's complement)."""
    x = a.view(np.int16).astype(np.int32)
    y = b.view(np.int16).astype(np.int32)
    if op is Opcode.ADD:
        r = x + y
    elif op is Opcode.SUB:
        r = x - y
    elif op is Opcode.MUL:
        r = x * y
    elif op is Opcode.MAX:
        r = np.maximum(x, y)
    elif op is Opcode.MIN:
        r = np.minimum(x, y)
    elif op is Opcode.MADD:
        r = x * y + c.view(np.int16).astype(np.int32)
    else:
        raise ValueError(f"{op.name} is not an arithmetic CAL op")
    if acc32 and op in (Opcode.MUL, Opcode.MADD):
        return np.clip(r, -32768, 32767).astype(np.int16).view(np.uint16)
    return (r & 0xFFFF).astype(np.uint16)


# -- CAL stage analysis ----------------------------------------------------------


@dataclass
class CalPlan:
    """Static schedule of one CAL stage in fetch order."""

    pcs: list[int]
    insts: list[Instruction]
    ops: np.ndarray
    f0: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    fetch_bank: list[int]
    read_banks: list[tuple[int, ...]]  # RAM reads issued in READ, by instruction
    write_bank: list[int]  # -1 when nothing is written back
    n_arith: int
    n_preread: int
    n_mac_insts: int
    reads_per_bank: tuple[int, ...]
    writes_per_bank: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.pcs)

    @property
    def duration(self) -> int:
        return self.n + CAL_LATENCY if self.pcs else 0


def plan_cal(iram: list, entry: int, end: int, iram_words: int, opm_banks: int) -> CalPlan:
    pcs, insts = [], []
    pc = entry
    while pc < end:
        inst = iram[pc]
        pcs.append(pc)
        insts.append(inst)
        pc += max(inst.sparse_pc_inc, 1)
    pr: dict[int, int | None] = {0: None, 1: None}
    read_banks, write_bank = [], []
    rpb = [0] * opm_banks
    wpb = [0] * opm_banks
    n_arith = n_pre = n_mac = 0
    for k, inst in enumerate(insts):
        banks = []
        for port, addr in read_ports(inst):
            if inst.op in CAL_ARITH and port in pr and pr[port] == addr:
                pr[port] = None
                continue
            banks.append(addr % opm_banks)
        if len(set(banks)) != len(banks):
            raise PortConflict(f"CAL pc {pcs[k]} ({inst.op.name}) reads one bank twice")
        for b in banks:
            rpb[b] += 1
        read_banks.append(tuple(banks))
        if inst.op is Opcode.PREREAD0:
            pr[0] = inst.f0
            n_pre += 1
            write_bank.append(-1)
        elif inst.op is Opcode.PREREAD1:
            pr[1] = inst.f1
            n_pre += 1
            write_bank.append(-1)
        else:
            n_arith += 1
            if inst.op in (Opcode.MUL, Opcode.MADD):
                n_mac += 1
            wb = inst.f2 % opm_banks
            wpb[wb] += 1
            write_bank.append(wb)
    return CalPlan(
        pcs=pcs,
        insts=insts,
        ops=np.array([int(i.op) for i in insts], dtype=np.int32),
        f0=np.array([i.f0 for i in insts], dtype=np.int32),
        f1=np.array([i.f1 for i in insts], dtype=np.int32),
        f2=np.array([i.f2 for i in insts], dtype=np.int32),
        fetch_bank=[pc // iram_words for pc in pcs],
        read_banks=read_banks,
        write_bank=write_bank,
        n_arith=n_arith,
        n_preread=n_pre,
        n_mac_insts=n_mac,
        reads_per_bank=tuple(rpb),
        writes_per_bank=tuple(wpb),
    )


class CalPipeline:
    """Register-accurate FETCH / READ / EXE / WRITEBACK pipeline.

    Writeback happens before READ within a cycle, so a distance-2 RAW hazard
    reads the new value from the RAM; a distance-1 hazard is forwarded from the
    Result register in EXE.  PreRead registers are latched in EXE (with the
    same forwarding) and consumed once by the next matching read of their port.
    """

    def __init__(self, opm: np.ndarray, insts: list[Instruction], acc32: bool = False):
        self.opm = opm
        self.insts = insts
        self.acc32 = acc32
        self.next = 0
        self.rd: Instruction | None = None  # fetched, READ next
        self.ex: tuple | None = None  # (inst, [(addr, data)]) read, EXE next
        self.wb: tuple[int, np.ndarray] | None = None
        self.result: tuple[int, np.ndarray] | None = None
        self.pr: dict[int, tuple[int, np.ndarray] | None] = {0: None, 1: None}
        self.cycles = 0

    @property
    def done(self) -> bool:
        return self.next >= len(self.insts) and self.rd is None and self.ex is None and self.wb is None

    def step(self) -> None:
        self.cycles += 1
        # WRITEBACK
        if self.wb is not None:
            addr, data = self.wb
            self.opm[addr] = data
            self.wb = None
        # EXE
        if self.ex is not None:
            inst, operands = self.ex
            vals = []
            for addr, data in operands:
                if self.result is not None and self.result[0] == addr:
                    data = self.result[1]
                vals.append(data)
            if inst.op is Opcode.PREREAD0:
                self.pr[0] = (inst.f0, vals[0])
                self.result = None
            elif inst.op is Opcode.PREREAD1:
                self.pr[1] = (inst.f1, vals[0])
                self.result = None
            else:
                c = vals[2] if inst.op is Opcode.MADD else vals[0]
                out = lane_op(inst.op, vals[0], vals[1], c, self.acc32)
                self.result = (inst.f2, out)
                self.wb = (inst.f2, out)
            self.ex = None
        # READ
        if self.rd is not None:
            inst = self.rd
            operands = []
            for port, addr in read_ports(inst):
                reg = self.pr.get(port) if inst.op in CAL_ARITH else None
                if reg is not None and reg[0] == addr:
                    operands.append((-1, reg[1]))  # -1: never forwarded over
                    self.pr[port] = None
                else:
                    operands.append((addr, self.opm[addr].copy()))
            self.ex = (inst, operands)
            self.rd = None
        # FETCH
        if self.next < len(self.insts):
            self.rd = self.insts[self.next]
            self.next += 1


def run_pipeline(opm: np.ndarray, insts: list[Instruction], acc32: bool = False) -> int:
    pipe = CalPipeline(opm, insts, acc32)
    while not pipe.done:
        pipe.step()
    return pipe.cycles


# -- control-unit records --------------------------------------------------------


@dataclass
class Block:
    slot: int
    frags: dict[int, list[int]] = field(default_factory=dict)
    desc: Descriptor | None = None
    state: State = State.UNINIT
    sparse_chunks: dict[int, list[int]] = field(default_factory=dict)
    sparse_done: bool = False
    enabled: bool = False
    acts: int = 0
    progress: Progress = Progress.NONE
    entry_pc: int = 0
    plan: CalPlan | None = None
    iteration: int = 0

    @property
    def key(self) -> tuple[int, int]:
        return (self.desc.priority, self.slot)

    def stage(self, s: int) -> tuple[int, int]:
        return self.desc.stage_start[s], self.desc.stage_end[s]

    def cal_len(self) -> int:
        a, b = self.stage(1)
        return b - a

    def sparse_bits(self) -> list[int] | None:
        """Full vector once every chunk has arrived, else None."""
        n = self.cal_len()
        if len(self.sparse_chunks) < max(1, -(-n // 64)):
            return None
        bits = [b for k in sorted(self.sparse_chunks) for b in self.sparse_chunks[k]]
        if len(bits) != n:
            raise VectorLengthMismatch(f"slot {self.slot}: {len(bits)} sparse bits for {n} CAL instructions")
        return bits


@dataclass
class Unit:
    name: str
    owner: Block | None = None
    pc: int = 0
    end: int = 0
    outstanding: int = 0
    start: int = 0


class PE:
    def __init__(self, idx: int, env: "Engine"):
        self.idx = idx
        self.env = env
        cfg = env.cfg
        self.cfg = cfg
        self.nb = cfg.opm_banks
        self.iw = cfg.iram_words
        self.opm = np.zeros((cfg.opm_banks * cfg.opm_entries, cfg.simd), dtype=np.uint16)
        self.iram: list[Instruction | None] = [None] * cfg.iram_capacity
        self.blocks: list[Block] = []
        self.bases: dict[int, tuple[int, int]] = {}
        self.inbound: deque = deque()
        self.ld = Unit("ld")
        self.flow = Unit("flow")
        self.st = Unit("st")
        # CAL unit
        self.cal_owner: Block | None = None
        self.cal_plan: CalPlan | None = None
        self.cal_t0 = 0
        self.cal_pipe: CalPipeline | None = None
        # loader
        self.loader_job: tuple | None = None  # (kind, block, writes, ptr, start)
        self.loader_wait: Block | None = None
        self.loader_job_start = 0
        self._sparse_entry = 0
        self.busy = {"ld": 0, "cal": 0, "flow": 0, "st": 0, "loader": 0}

    # -- control messages --------------------------------------------------------

    def handle_control(self, msg: tuple) -> None:
        kind, word = msg
        env = self.env
        if kind == "init":
            slot, frag, fields = decode_fragment(word)
            if slot >= self.cfg.max_blocks:
                raise SlotOverflow(f"PE {self.idx}: slot {slot} exceeds {self.cfg.max_blocks} ExeBlocks")
            while len(self.blocks) <= slot:
                self.blocks.append(Block(len(self.blocks)))
            blk = self.blocks[slot]
            blk.frags[frag] = fields
            if len(blk.frags) == N_FRAGS:
                blk.desc = dataclasses.replace(assemble_descriptor(self.idx, "", blk.frags), slot=slot)
                blk.state = State.INITIALIZED
                env.trace.emit(env.now, self.idx, "ctrl", "initialized", slot)
        elif kind == "sparse":
            slot, idx, bits = decode_sparse_chunk(word)
            if slot >= len(self.blocks):
                raise PeError(f"PE {self.idx}: sparse vector for unknown slot {slot}")
            self.blocks[slot].sparse_chunks[idx] = bits
        elif kind == "enable":
            task, ld_base, st_base = decode_enable(word)
            self.bases[task] = (ld_base, st_base)
            for blk in self.blocks:
                if blk.desc is not None and blk.desc.task_id == task:
                    blk.enabled = True
        else:
            raise PeError(f"unknown control message {kind!r}")

    def deliver(self, msg: tuple) -> None:
        kind = msg[0]
        if kind in ("init", "sparse", "enable"):
            self.handle_control(msg)
        elif kind == "data" or kind == "act":
            self.inbound.append(msg)
        elif kind == "ack":
            self.st.outstanding -= 1
        elif kind == "imem":
            _, slot, words = msg
            blk = self.blocks[slot]
            writes = [(blk.desc.iram_start + k, w) for k, w in enumerate(words)]
            self.loader_job = ("load", blk, writes, 0, self.loader_job_start)
            self.loader_wait = None
        else:
            raise PeError(f"unknown message {kind!r}")

    # -- per-cycle behaviour ----------------------------------------------------

    def tick(self) -> bool:
        env = self.env
        now = env.now
        changed = False
        # CAL stage completion
        if self.cal_owner is not None:
            if self.cal_pipe is not None:
                self.cal_pipe.step()
            if now >= self.cal_t0 + self.cal_plan.duration:
                assert self.cal_pipe is None or self.cal_pipe.done
                blk = self.cal_owner
                blk.progress = Progress.CAL_DONE
                env.trace.emit(now, self.idx, "cal", "end", blk.slot)
                self.cal_owner = None
                self.cal_plan = None
                self.cal_pipe = None
                changed = True
        changed |= self._grant()
        iram_busy: set[int] = set()
        read_busy: set[int] = set()
        write_busy: set[int] = set()
        plan = self.cal_plan
        if plan is not None:
            k = now - self.cal_t0
            if 0 <= k < plan.n:
                iram_busy.add(plan.fetch_bank[k])
            if 0 <= k - 1 < plan.n:
                read_busy.update(plan.read_banks[k - 1])
            if 0 <= k - 3 < plan.n and plan.write_bank[k - 3] >= 0:
                write_busy.add(plan.write_bank[k - 3])
        active = self._loader(iram_busy)
        active |= self._inbound(write_busy)
        active |= self._ld_issue(iram_busy)
        active |= self._flow_issue(iram_busy, read_busy)
        active |= self._st_issue(iram_busy, read_busy)
        if self.cal_owner is not None:
            end = self.cal_t0 + self.cal_plan.duration
            if self.cal_pipe is not None or self.inbound or active:
                active = True
            else:
                env.wake(self.idx, end)
        return active or changed

    def _eligible(self, pred) -> Block | None:
        best = None
        for blk in self.blocks:
            if blk.desc is not None and pred(blk) and (best is None or blk.key < best.key):
                best = blk
        return best

    def _advance_empty(self, blk: Block) -> bool:
        """Move a block through stages that have no instructions."""
        moved = False
        while True:
            p = blk.progress
            if p is Progress.NONE and blk.enabled and blk.state is State.READY and self._empty(blk, 0):
                blk.progress = Progress.LD_DONE
            elif p is Progress.LD_DONE and blk.acts >= blk.desc.pred_count and self._cal_empty(blk):
                self._check_acts(blk)
                blk.progress = Progress.CAL_DONE
            elif p is Progress.CAL_DONE and self._empty(blk, 2):
                self._send_activations(blk)
                blk.progress = Progress.FLOW_DONE
            elif p is Progress.FLOW_DONE and self._empty(blk, 3):
                self._reset(blk)
            else:
                return moved
            moved = True

    def _empty(self, blk: Block, s: int) -> bool:
        a, b = blk.stage(s)
        return a == b

    def _cal_empty(self, blk: Block) -> bool:
        return blk.plan is not None and blk.plan.n == 0

    def _check_acts(self, blk: Block) -> None:
        if blk.acts > blk.desc.pred_count:
            raise PeError(f"PE {self.idx} slot {blk.slot}: {blk.acts} activations for {blk.desc.pred_count} predecessors")

    def _grant(self) -> bool:
        env = self.env
        now = env.now
        changed = False
        for blk in self.blocks:
            if blk.desc is not None:
                changed |= self._advance_empty(blk)
        if self.cal_owner is None:
            blk = self._eligible(
                lambda b: b.progress is Progress.LD_DONE and b.acts >= b.desc.pred_count and b.plan is not None
            )
            if blk is not None:
                self._check_acts(blk)
                self._start_cal(blk)
                changed = True
        for unit, before, running, s in (
            (self.ld, Progress.NONE, Progress.LD_RUNNING, 0),
            (self.flow, Progress.CAL_DONE, Progress.FLOW_RUNNING, 2),
            (self.st, Progress.FLOW_DONE, Progress.ST_RUNNING, 3),
        ):
            if unit.owner is not None:
                continue
            if s == 0:
                pred = lambda b: b.progress is before and b.enabled and b.state is State.READY
            else:
                pred = lambda b, before=before: b.progress is before
            blk = self._eligible(pred)
            if blk is None:
                continue
            unit.owner = blk
            unit.pc, unit.end = blk.stage(s)
            unit.outstanding = 0
            unit.start = now
            blk.progress = running
            env.trace.emit(now, self.idx, unit.name, "begin", blk.slot)
            changed = True
        return changed

    def _start_cal(self, blk: Block) -> None:
        env = self.env
        plan = blk.plan
        blk.progress = Progress.CAL_RUNNING
        self.cal_owner = blk
        self.cal_plan = plan
        self.cal_t0 = env.now
        self.busy["cal"] += plan.duration
        if self.cfg.cal_model == "cycle":
            self.cal_pipe = CalPipeline(self.opm, plan.insts, self.cfg.accumulate32)
            self.cal_pipe.step()
        else:
            fastpath.cal_exec(self.opm, plan.ops, plan.f0, plan.f1, plan.f2, self.cfg.accumulate32)
        env.trace.emit(
            env.now,
            self.idx,
            "cal",
            "stage",
            blk.slot,
            (plan.n, plan.n_arith, plan.n_preread, plan.n_mac_insts, plan.duration)
            + plan.reads_per_bank
            + plan.writes_per_bank,
        )

    # -- loader -----------------------------------------------------------------

    def _loader(self, iram_busy: set[int]) -> bool:
        env = self.env
        if self.loader_job is None and self.loader_wait is None:
            blk = self._eligible(lambda b: b.state is State.INITIALIZED)
            sparse = self._eligible(lambda b: b.state is State.LOADED and b.sparse_bits() is not None)
            if sparse is not None and (blk is None or sparse.key < blk.key):
                self._start_sparse(sparse)
            elif blk is not None:
                blk.state = State.LOADING
                n = blk.desc.n_insts
                self.loader_wait = blk
                self.loader_job_start = env.now
                env.send_mem_instr(self.idx, blk.slot, blk.desc.inst_dram_addr, n)
                env.trace.emit(env.now, self.idx, "loader", "dma", blk.desc.inst_dram_addr, (n,))
                return True
            else:
                return False
        if self.loader_job is None:
            return False
        kind, blk, writes, ptr, start = self.loader_job
        if ptr < len(writes):
            pc, word = writes[ptr]
            bank = pc // self.iw
            if bank not in iram_busy:
                iram_busy.add(bank)
                self.iram[pc] = decode(word) if kind == "load" else word
                ptr += 1
        if ptr < len(writes):
            self.loader_job = (kind, blk, writes, ptr, start)
            return True
        self.loader_job = None
        self.busy["loader"] += env.now + 1 - start
        env.trace.emit(env.now, self.idx, "loader", kind + "_done", blk.slot, (len(writes), start))
        if kind == "load":
            blk.state = State.LOADED
            if not blk.desc.sparse:
                self._make_ready(blk, blk.stage(1)[0])
        else:
            self._make_ready(blk, self._sparse_entry)
        return True

    def _start_sparse(self, blk: Block) -> None:
        bits = blk.sparse_bits()
        a, b = blk.stage(1)
        writes = []
        nxt = b
        for k in range(len(bits) - 1, -1, -1):
            if bits[k]:
                inc = nxt - (a + k)
                if inc > 255:
                    raise PeError(f"PE {self.idx} slot {blk.slot}: skip distance {inc} exceeds 255")
                writes.append((a + k, self.iram[a + k].with_inc(inc)))
                nxt = a + k
        writes.reverse()
        self._sparse_entry = nxt
        blk.state = State.SPARSE_UPDATING
        self.loader_job = ("sparse", blk, writes, 0, self.env.now)

    def _make_ready(self, blk: Block, entry: int) -> None:
        blk.entry_pc = entry
        a, b = blk.stage(1)
        blk.plan = plan_cal(self.iram, entry, b, self.iw, self.nb)
        blk.state = State.READY

    # -- inbound data / activations ------------------------------------------------

    def _inbound(self, write_busy: set[int]) -> bool:
        if not self.inbound:
            return False
        env = self.env
        keep: deque = deque()
        while self.inbound:
            msg = self.inbound[0]
            if msg[0] == "act":
                if keep:
                    break
                self.inbound.popleft()
                blk = self.blocks[msg[1]]
                blk.acts += 1
                env.trace.emit(env.now, self.idx, "ctrl", "activated", blk.slot)
                continue
            self.inbound.popleft()
            _, addr, vec, from_ld = msg
            bank = addr % self.nb
            if bank in write_busy:
                keep.append(msg)
                continue
            write_busy.add(bank)
            self.opm[addr] = vec
            env.trace.emit(env.now, self.idx, "opm", "write", addr, (bank, int(from_ld)))
            if from_ld:
                self.ld.outstanding -= 1
        keep.extend(self.inbound)
        self.inbound = keep
        return True

    # -- LD / FLOW / ST units ---------------------------------------------------------

    def _finish(self, unit: Unit, progress: Progress) -> None:
        env = self.env
        blk = unit.owner
        blk.progress = progress
        self.busy[unit.name] += env.now + 1 - unit.start
        env.trace.emit(env.now, self.idx, unit.name, "end", blk.slot, (unit.start,))
        unit.owner = None

    def _ld_issue(self, iram_busy: set[int]) -> bool:
        u = self.ld
        if u.owner is None:
            return False
        env = self.env
        if u.pc < u.end and u.outstanding < self.cfg.lsu_window:
            bank = u.pc // self.iw
            if bank not in iram_busy:
                iram_busy.add(bank)
                inst = self.iram[u.pc]
                base = self.bases[u.owner.desc.task_id][0]
                addr = (base + inst.dram_offset) & 0xFFFFFFFF
                env.send_mem_read(self.idx, addr, inst.f0)
                env.trace.emit(env.now, self.idx, "ld", "issue", addr, (bank,))
                u.pc += 1
                u.outstanding += 1
        if u.pc >= u.end and u.outstanding == 0:
            self._finish(u, Progress.LD_DONE)
            return True
        return u.pc < u.end and u.outstanding < self.cfg.lsu_window

    def _flow_issue(self, iram_busy: set[int], read_busy: set[int]) -> bool:
        u = self.flow
        if u.owner is None:
            return False
        env = self.env
        if u.pc < u.end:
            bank = u.pc // self.iw
            if bank not in iram_busy:
                inst = self.iram[u.pc]
                rbank = inst.f0 % self.nb
                if rbank not in read_busy:
                    iram_busy.add(bank)
                    read_busy.add(rbank)
                    env.send_copy(self.idx, inst.f2, inst.f1, self.opm[inst.f0].copy())
                    env.trace.emit(env.now, self.idx, "flow", "copy", inst.f0, (bank, rbank, inst.f2))
                    u.pc += 1
        if u.pc >= u.end:
            self._send_activations(u.owner)
            self._finish(u, Progress.FLOW_DONE)
        return True

    def _send_activations(self, blk: Block) -> None:
        env = self.env
        for pe, slot in blk.desc.successors:
            env.send_activation(self.idx, pe, slot)
            env.trace.emit(env.now, self.idx, "flow", "activate", slot, (pe,))

    def _st_issue(self, iram_busy: set[int], read_busy: set[int]) -> bool:
        u = self.st
        if u.owner is None:
            return False
        env = self.env
        if u.pc < u.end and u.outstanding < self.cfg.lsu_window:
            bank = u.pc // self.iw
            if bank not in iram_busy:
                inst = self.iram[u.pc]
                rbank = inst.f0 % self.nb
                if rbank not in read_busy:
                    iram_busy.add(bank)
                    read_busy.add(rbank)
                    base = self.bases[u.owner.desc.task_id][1]
                    addr = (base + inst.dram_offset) & 0xFFFFFFFF
                    env.send_mem_write(self.idx, addr, self.opm[inst.f0].copy(), inst.lookup_type)
                    env.trace.emit(env.now, self.idx, "st", "issue", addr, (bank, rbank, inst.lookup_type))
                    u.pc += 1
                    u.outstanding += 1
        if u.pc >= u.end and u.outstanding == 0:
            blk = u.owner
            self._finish(u, Progress.DONE)
            self._reset(blk)
            return True
        return u.pc < u.end and u.outstanding < self.cfg.lsu_window

    def _reset(self, blk: Block) -> None:
        env = self.env
        blk.progress = Progress.NONE
        blk.acts = 0
        blk.enabled = False
        blk.iteration += 1
        env.trace.emit(env.now, self.idx, "ctrl", "reset", blk.slot, (blk.desc.task_id,))
        env.send_completion(self.idx, blk.slot, blk.desc.task_id)

    # -- introspection --------------------------------------------------------------

    def stuck_report(self) -> list[str]:
        out = []
        for blk in self.blocks:
            if blk.desc is None:
                out.append(f"PE {self.idx} slot {blk.slot}: descriptor incomplete ({len(blk.frags)}/5 fragments)")
                continue
            if blk.progress is not Progress.NONE or (blk.enabled and blk.state is State.READY):
                out.append(
                    f"PE {self.idx} slot {blk.slot}: state={blk.state.name} progress={blk.progress.name} "
                    f"acts={blk.acts}/{blk.desc.pred_count} enabled={blk.enabled}"
                )
            elif blk.state is not State.READY:
                out.append(f"PE {self.idx} slot {blk.slot}: state={blk.state.name}")
        return out
