"""Everything outside the PEs: NoCs, cache slices, DRAM, table loader, host.

The simulation is synchronous.  Each cycle has two phases:

1. compute: deliver messages due this cycle, tick cache slices, then tick PEs;
   components only append injections to an outbox;
2. commit: injections are sorted by (network, source node, issue order) and
   routed, so results do not depend on the order in which PEs were evaluated.

Mesh NoCs use X-then-Y routing with per-link reservation: a flit occupies a
link for one cycle, each hop costs 2 cycles (link + router), and a message's
flits follow its head back to back.  Every link keeps a next-free counter,
so messages that share a path are delivered in injection order.
"""

from __future__ import annotations

import heapq
import math
import random
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .config import HardwareConfig
from .pe import PE
from .trace import Trace
from .translator import Program, enable_payload

NETWORKS = ("memory", "interpe", "control")
HOP_CYCLES = 2


class SimulationError(Exception):
    pass


class DeadlockDetected(SimulationError):
    def __init__(self, cycle: int, stuck: list[str]):
        head = "; ".join(stuck[:8]) + (" ..." if len(stuck) > 8 else "")
        super().__init__(f"no progress at cycle {cycle}: {head}")
        self.cycle = cycle
        self.stuck = stuck


class UnregisteredTable(SimulationError):
    pass


# -- DRAM ----------------------------------------------------------------------


class Dram:
    """Fixed latency plus a token-bucket bandwidth cap, in FIFO order."""

    def __init__(self, latency: int, bytes_per_cycle: int):
        self.latency = latency
        self.bw = bytes_per_cycle
        self.free = 0  # in byte-times (cycles * bw)

    def request(self, now: int, nbytes: int) -> int:
        start = max(now * self.bw, self.free)
        self.free = start + nbytes
        return -(-self.free // self.bw) + self.latency


# -- cache slice ---------------------------------------------------------------


class CacheSlice:
    """Set-associative, write-back, write-allocate, LRU; non-blocking with MSHRs."""

    def __init__(self, idx: int, cfg: HardwareConfig):
        self.idx = idx
        self.block = cfg.cache_block
        self.ways = cfg.cache_ways
        self.n_slices = cfg.cache_slices
        slice_bytes = cfg.cache_bytes // cfg.cache_slices
        self.n_sets = max(1, slice_bytes // (cfg.cache_block * cfg.cache_ways))
        self.sets: list[OrderedDict[int, bool]] = [OrderedDict() for _ in range(self.n_sets)]
        self.mshr: dict[int, list[tuple]] = {}
        self.queue: list[tuple] = []

    def set_of(self, block: int) -> OrderedDict:
        return self.sets[(block // self.n_slices) % self.n_sets]

    def lookup(self, block: int) -> bool:
        s = self.set_of(block)
        if block in s:
            s.move_to_end(block)
            return True
        return False

    def install(self, block: int) -> int | None:
        """Insert a block; returns the evicted dirty block, if any."""
        s = self.set_of(block)
        victim = None
        if len(s) >= self.ways:
            old, dirty = s.popitem(last=False)
            if dirty:
                victim = old
        s[block] = False
        return victim

    def mark_dirty(self, block: int) -> None:
        self.set_of(block)[block] = True

    def dirty_blocks(self) -> list[int]:
        return sorted(b for s in self.sets for b, d in s.items() if d)


def slice_of(addr: int, cfg: HardwareConfig) -> int:
    return (addr // cfg.cache_block) % cfg.cache_slices


# -- engine --------------------------------------------------------------------


@dataclass
class SimResult:
    cycles: int
    trace: Trace
    memory: np.ndarray  # final DRAM contents as halfwords
    program: Program
    iterations: list[tuple[int, int, int]] = field(default_factory=list)  # (task, iteration, end cycle)
    enables: list[tuple[int, int, int]] = field(default_factory=list)  # (task, iteration, cycle)
    busy: list[dict[str, int]] = field(default_factory=list)

    def read(self, addr: int, n_halfwords: int) -> np.ndarray:
        return self.memory[addr >> 1 : (addr >> 1) + n_halfwords].copy()

    def read_region(self, name: str) -> np.ndarray:
        base, size = self.program.regions[name]
        return self.read(base, size // 2)

    def dram_image(self) -> dict[int, int]:
        return memory_image(self.memory)


def memory_image(mem: np.ndarray) -> dict[int, int]:
    nz = np.nonzero(mem)[0]
    return {int(i) * 2: int(mem[i]) for i in nz}


def build_memory(program: Program) -> np.ndarray:
    top = max([b + s for b, s in program.regions.values()] + [max(program.dram, default=-2) + 2, 2])
    top += 2 * program.cfg.simd  # slack for the last entry
    mem = np.zeros((top + 1) // 2, dtype=np.uint16)
    if program.dram:
        addrs = np.fromiter(program.dram.keys(), dtype=np.int64)
        vals = np.fromiter(program.dram.values(), dtype=np.int64)
        mem[addrs >> 1] = vals
    return mem


class Engine:
    def __init__(self, program: Program, *, eval_order: str = "ascending", seed: int = 0, trace: bool = True):
        self.program = program
        cfg = program.cfg
        self.cfg = cfg
        self.now = 0
        self.trace = Trace(enabled=trace)
        self.mem = build_memory(program)
        self.tables = {int(k): np.asarray(v, dtype=np.uint16) for k, v in program.tables.items()}
        self.n = cfg.n_pes
        self.pes = [PE(i, self) for i in range(self.n)]
        self.slices = [CacheSlice(s, cfg) for s in range(cfg.cache_slices)]
        # one DRAM channel per memory controller; slice s sits behind controller s % count
        self.drams = [Dram(cfg.dram_latency, cfg.dram_bytes_per_cycle) for _ in range(cfg.mem_controllers)]
        self.heap: list[tuple] = []
        self.seq = 0
        self.outbox: list[tuple] = []
        self.active_pes: set[int] = set()
        self.active_slices: set[int] = set()
        self.link_free = [dict() for _ in NETWORKS]
        self.pos = [cfg.coord(i) for i in range(self.n)]
        for s in range(cfg.cache_slices):
            self.pos.append((0, s * cfg.mesh_y // cfg.cache_slices))
        self.ctrl_latency = max(1, math.ceil(math.log2(self.n))) if self.n > 1 else 1
        self.host_out_free = 0
        self.host_in_free = 0
        self.eval_order = eval_order
        self.rng = random.Random(seed)
        # host state
        self.task_members = {}
        for d in program.descriptors:
            self.task_members[d.task_id] = self.task_members.get(d.task_id, 0) + 1
        self.task_index = -1
        self.iteration = 0
        self.completed = 0
        self.finished = False
        self.iterations: list[tuple[int, int, int]] = []
        self.enables: list[tuple[int, int, int]] = []

    # -- scheduling --------------------------------------------------------------

    def at(self, t: int, kind: str, target: int, msg: tuple = ()) -> None:
        self.seq += 1
        heapq.heappush(self.heap, (t, self.seq, kind, target, msg))

    def wake(self, pe: int, t: int) -> None:
        self.at(t, "wake", pe)

    def _inject(self, net: int, src: int, dst: int, flits: int, kind: str, target: int, msg: tuple) -> None:
        self.outbox.append((net, src, len(self.outbox), dst, flits, kind, target, msg))

    # -- PE-facing API -------------------------------------------------------------

    def send_mem_read(self, pe: int, addr: int, opm_addr: int) -> None:
        s = slice_of(addr, self.cfg)
        self._inject(0, pe, self.n + s, 1, "slice", s, ("rd", addr, pe, opm_addr))

    def send_mem_write(self, pe: int, addr: int, vec: np.ndarray, lookup: int) -> None:
        s = slice_of(addr, self.cfg)
        self._inject(0, pe, self.n + s, self.cfg.flits_per_entry, "slice", s, ("wr", addr, pe, vec, lookup))

    def send_mem_instr(self, pe: int, slot: int, addr: int, n_words: int) -> None:
        s = slice_of(addr, self.cfg)
        self._inject(0, pe, self.n + s, 1, "imem", s, (addr, n_words, pe, slot))

    def send_copy(self, src: int, dst: int, opm_addr: int, vec: np.ndarray) -> None:
        self._inject(1, src, dst, self.cfg.flits_per_entry, "pe", dst, ("data", opm_addr, vec, False))

    def send_activation(self, src: int, dst: int, slot: int) -> None:
        self._inject(1, src, dst, 1, "pe", dst, ("act", slot))

    def send_completion(self, pe: int, slot: int, task_id: int) -> None:
        t = max(self.now + self.ctrl_latency, self.host_in_free)
        self.host_in_free = t + 1
        self.trace.emit(self.now, pe, "noc", "control", -1, (1, self.ctrl_latency))
        self.at(t, "host", pe, (slot, task_id))

    # -- host --------------------------------------------------------------------

    def host_send(self, t: int, pe: int, msg: tuple) -> None:
        """Host control message over the tree; pe == -1 broadcasts."""
        t = max(t, self.host_out_free)
        self.host_out_free = t + 1
        arrive = t + self.ctrl_latency
        if pe < 0:
            self.trace.emit(t, -1, "noc", "control", -1, (1, 2 * self.n - 2))
            for p in range(self.n):
                self.at(arrive, "pe", p, msg)
        else:
            self.trace.emit(t, -1, "noc", "control", pe, (1, self.ctrl_latency))
            self.at(arrive, "pe", pe, msg)
        self.trace.emit(t, -1, "host", msg[0], pe)

    def _enable(self, t: int) -> None:
        tasks = self.program.tasks
        while self.task_index < len(tasks) and self.task_members.get(tasks[self.task_index].task_id, 0) == 0:
            self.task_index += 1
            self.iteration = 0
        if self.task_index >= len(tasks):
            self.finished = True
            return
        task = tasks[self.task_index]
        ld = (task.ld_base + self.iteration * task.ld_stride) & 0xFFFFFFFF
        st = (task.st_base + self.iteration * task.st_stride) & 0xFFFFFFFF
        self.completed = 0
        self.enables.append((task.task_id, self.iteration, t))
        self.host_send(t, -1, ("enable", enable_payload(task.task_id, ld, st)))

    def _host_completion(self, pe: int, slot: int, task_id: int) -> None:
        task = self.program.tasks[self.task_index]
        if task_id != task.task_id:
            raise SimulationError(f"completion for task {task_id} while task {task.task_id} runs")
        self.completed += 1
        if self.completed < self.task_members[task_id]:
            return
        self.iterations.append((task_id, self.iteration, self.now))
        self.trace.emit(self.now, -1, "host", "iteration", task_id, (self.iteration,))
        if self.iteration + 1 < task.iterations:
            self.iteration += 1
        else:
            self.task_index += 1
            self.iteration = 0
        self._enable(self.now + 1)

    # -- slices ------------------------------------------------------------------

    def _dram(self, slice_idx: int) -> Dram:
        return self.drams[slice_idx % len(self.drams)]

    def _slice_tick(self, sl: CacheSlice) -> bool:
        if not sl.queue:
            return False
        req = sl.queue.pop(0)
        cfg = self.cfg
        if req[0] == "wr" and req[4]:
            _, addr, pe, vec, lookup = req
            table = self.tables.get(lookup)
            if table is None:
                raise UnregisteredTable(f"lookup type {lookup} has no registered table")
            done = self._dram(sl.idx).request(self.now, 2 * cfg.simd)
            self.trace.emit(self.now, -1, "dram", "read", addr, (2 * cfg.simd, 2))
            self.at(done, "lookup", sl.idx, ("wr", addr, pe, table[vec], 0))
            return bool(sl.queue)
        block = req[1] // cfg.cache_block
        write = req[0] == "wr"
        if sl.lookup(block):
            self.trace.emit(self.now, sl.idx, "cache", "access", req[1], (1, int(write)))
            self._serve(sl, req, block, self.now + cfg.cache_hit_latency)
        elif block in sl.mshr:
            self.trace.emit(self.now, sl.idx, "cache", "access", req[1], (2, int(write)))
            sl.mshr[block].append(req)
        else:
            self.trace.emit(self.now, sl.idx, "cache", "access", req[1], (0, int(write)))
            sl.mshr[block] = [req]
            done = self._dram(sl.idx).request(self.now, cfg.cache_block)
            self.trace.emit(self.now, -1, "dram", "read", block * cfg.cache_block, (cfg.cache_block, 0))
            self.at(done, "fill", sl.idx, (block,))
        return bool(sl.queue)

    def _serve(self, sl: CacheSlice, req: tuple, block: int, t: int) -> None:
        simd = self.cfg.simd
        h = req[1] >> 1
        if req[0] == "rd":
            vec = self.mem[h : h + simd].copy()
            self.at(t, "send", sl.idx, (0, self.n + sl.idx, req[2], self.cfg.flits_per_entry, "pe", req[2], ("data", req[3], vec, True)))
        else:
            if h + simd > len(self.mem):
                raise SimulationError(f"store to {req[1]:#x} outside DRAM image")
            self.mem[h : h + simd] = req[3]
            sl.mark_dirty(block)
            self.at(t, "send", sl.idx, (0, self.n + sl.idx, req[2], 1, "pe", req[2], ("ack",)))

    def _fill(self, sl: CacheSlice, block: int) -> None:
        cfg = self.cfg
        victim = sl.install(block)
        if victim is not None:
            self._dram(sl.idx).request(self.now, cfg.cache_block)
            self.trace.emit(self.now, sl.idx, "cache", "writeback", victim * cfg.cache_block)
            self.trace.emit(self.now, -1, "dram", "write", victim * cfg.cache_block, (cfg.cache_block, 0))
        for req in sl.mshr.pop(block):
            self._serve(sl, req, block, self.now + cfg.cache_hit_latency)

    def _imem(self, s: int, addr: int, n_words: int, pe: int, slot: int) -> None:
        nbytes = 8 * n_words
        done = self._dram(s).request(self.now, nbytes)
        self.trace.emit(self.now, -1, "dram", "read", addr, (nbytes, 1))
        h = addr >> 1
        raw = self.mem[h : h + 4 * n_words].astype(np.uint64).reshape(-1, 4)
        words = (raw[:, 0] | (raw[:, 1] << 16) | (raw[:, 2] << 32) | (raw[:, 3] << 48)).tolist()
        flits = max(1, -(-nbytes // 16))
        self.at(done, "send", s, (0, self.n + s, pe, flits, "pe", pe, ("imem", slot, words)))

    # -- main loop ---------------------------------------------------------------

    def _dispatch(self, kind: str, target: int, msg: tuple) -> None:
        if kind == "pe":
            self.pes[target].deliver(msg)
            self.active_pes.add(target)
        elif kind == "wake":
            self.active_pes.add(target)
        elif kind == "slice":
            self.slices[target].queue.append(msg)
            self.active_slices.add(target)
        elif kind == "lookup":
            self.slices[target].queue.append(msg)
            self.active_slices.add(target)
        elif kind == "fill":
            self._fill(self.slices[target], msg[0])
        elif kind == "imem":
            self._imem(target, *msg)
        elif kind == "send":
            net, src, dst, flits, k, tgt, m = msg
            self._inject(net, src, dst, flits, k, tgt, m)
        elif kind == "host":
            self._host_completion(target, *msg)
        elif kind == "script":
            rec = msg[0]
            self.host_send(self.now, rec.pe, (rec.kind, rec.payload))
        else:
            raise SimulationError(f"unknown event {kind}")

    def _route(self, net: int, src: int, dst: int, flits: int, t: int) -> tuple[int, int]:
        free = self.link_free[net]
        key = ("i", src)
        d = max(t, free.get(key, 0))
        free[key] = d + flits
        sx, sy = self.pos[src]
        dx, dy = self.pos[dst]
        hops = abs(dx - sx) + abs(dy - sy)
        if hops == 0:
            head = d + 1
        else:
            head = d
            x, y = sx, sy
            while x != dx:
                nx = x + (1 if dx > x else -1)
                link = (x, y, nx, y)
                d = max(head, free.get(link, 0))
                free[link] = d + flits
                head = d + HOP_CYCLES
                x = nx
            while y != dy:
                ny = y + (1 if dy > y else -1)
                link = (x, y, x, ny)
                d = max(head, free.get(link, 0))
                free[link] = d + flits
                head = d + HOP_CYCLES
                y = ny
        key = ("e", dst)
        d = max(head, free.get(key, 0))
        free[key] = d + flits
        return d + flits - 1, hops

    def _commit(self) -> None:
        if not self.outbox:
            return
        self.outbox.sort(key=lambda e: (e[0], e[1], e[2]))
        for net, src, _, dst, flits, kind, target, msg in self.outbox:
            t, hops = self._route(net, src, dst, flits, self.now)
            self.trace.emit(self.now, src, "noc", NETWORKS[net], dst, (flits, hops))
            self.at(t, kind, target, msg)
        self.outbox.clear()

    def _pe_order(self) -> list[int]:
        order = sorted(self.active_pes)
        if self.eval_order == "descending":
            order.reverse()
        elif self.eval_order == "random":
            self.rng.shuffle(order)
        return order

    def run(self) -> SimResult:
        cfg = self.cfg
        for rec in self.program.script:
            if rec.kind == "enable":
                self.task_index = 0
                self.iteration = 0
                self.at(rec.time, "enable", 0)
            else:
                self.at(rec.time, "script", 0, (rec,))
        if not self.program.tasks or not self.program.descriptors:
            self.finished = True
        while not self.finished:
            heap = self.heap
            while heap and heap[0][0] <= self.now:
                t, _, kind, target, msg = heapq.heappop(heap)
                if kind == "enable":
                    self._enable(self.now)
                else:
                    self._dispatch(kind, target, msg)
            for s in sorted(self.active_slices):
                if not self._slice_tick(self.slices[s]):
                    self.active_slices.discard(s)
            for p in self._pe_order():
                if not self.pes[p].tick():
                    self.active_pes.discard(p)
            self._commit()
            if self.finished:
                break
            if self.active_pes or self.active_slices:
                self.now += 1
            elif heap:
                nxt = heap[0][0]
                if nxt - self.now > cfg.watchdog:
                    raise DeadlockDetected(self.now, self.stuck_report())
                self.now = max(nxt, self.now + 1)
            else:
                raise DeadlockDetected(self.now, self.stuck_report())
        for sl in self.slices:
            for b in sl.dirty_blocks():
                self.trace.emit(self.now, sl.idx, "cache", "flush", b * cfg.cache_block)
        self.trace.emit(self.now, -1, "host", "end", 0, (self.now,))
        return SimResult(
            cycles=self.now,
            trace=self.trace,
            memory=self.mem,
            program=self.program,
            iterations=self.iterations,
            enables=self.enables,
            busy=[dict(p.busy) for p in self.pes],
        )

    def stuck_report(self) -> list[str]:
        out = []
        for p in self.pes:
            out.extend(p.stuck_report())
        return out or ["no blocks pending"]


def host_run(program: Program, *, eval_order: str = "ascending", seed: int = 0) -> SimResult:
    """Preload DRAM, play the control script, auto-enable tasks, run to completion."""
    return Engine(program, eval_order=eval_order, seed=seed).run()
