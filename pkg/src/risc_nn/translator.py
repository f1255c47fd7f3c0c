"""Maps an ExecutionGraph onto the physical machine and emits loadable artifacts.

Phases: ``place`` -> ``allocate_operands`` -> ``insert_prereads`` -> ``emit``.
``translate`` runs all of them.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

from .config import HardwareConfig
from .graph import ExecutionGraph, GraphError, validate_graph
from .isa import CAL_ARITH, Instruction, Opcode, Stage, encode

INST_BYTES = 8
REGION_ALIGN = 4096


class TranslationError(Exception):
    pass


class CapacityExceeded(TranslationError):
    def __init__(self, pe: int, resource: str, need: int, limit: int):
        super().__init__(f"PE {pe}: {resource} needs {need}, capacity {limit}")
        self.pe, self.resource = pe, resource


class OperandCapacityExceeded(CapacityExceeded):
    pass


class SkipDistanceOverflow(TranslationError):
    pass


class ResidualConflict(TranslationError):
    pass


# logical operand namespace: a pinned logical PE id, or ("inst", name) for unpinned blocks
SpaceKey = Hashable


@dataclass
class PhysicalMapping:
    pe_of: dict[str, int] = field(default_factory=dict)  # instance -> physical PE index
    pe_of_logical: dict[int, int] = field(default_factory=dict)
    slot_of: dict[str, int] = field(default_factory=dict)
    # physical PE -> {(space, logical addr): physical OPM address}
    operands: dict[int, dict[tuple[SpaceKey, int], int]] = field(default_factory=dict)
    bank_load: dict[int, list[int]] = field(default_factory=dict)

    def space(self, graph: ExecutionGraph, name: str) -> SpaceKey:
        lpe = graph.instances[name].logical_pe
        return lpe if lpe is not None else ("inst", name)


def opm_bank(addr: int, cfg: HardwareConfig) -> int:
    return addr % cfg.opm_banks


def opm_address(bank: int, entry: int, cfg: HardwareConfig) -> int:
    return entry * cfg.opm_banks + bank


# -- placement ---------------------------------------------------------------


def place(graph: ExecutionGraph, cfg: HardwareConfig) -> PhysicalMapping:
    n = cfg.n_pes
    mapping = PhysicalMapping()
    cursor = 0
    for lpe in sorted(graph.logical_pes()):
        mapping.pe_of_logical[lpe] = cursor % n
        cursor += 1
    counts: dict[int, int] = defaultdict(int)
    for inst in graph.instances.values():
        if inst.logical_pe is not None:
            pe = mapping.pe_of_logical[inst.logical_pe]
        else:
            pe = cursor % n
            cursor += 1
        mapping.pe_of[inst.name] = pe
        mapping.slot_of[inst.name] = counts[pe]
        counts[pe] += 1
        if counts[pe] > cfg.max_blocks:
            raise CapacityExceeded(pe, "ExeBlock slots", counts[pe], cfg.max_blocks)
    return mapping


# -- operand allocation ------------------------------------------------------


def _cal_roles(inst: Instruction) -> list[tuple[int, int]]:
    """(role, logical addr) pairs for OPM operands of a CAL instruction."""
    if inst.op in CAL_ARITH:
        return [(0, inst.f0), (1, inst.f1), (2, inst.f2)]
    if inst.op is Opcode.PREREAD0:
        return [(0, inst.f0)]
    if inst.op is Opcode.PREREAD1:
        return [(1, inst.f1)]
    return []


def _operand_uses(graph: ExecutionGraph, mapping: PhysicalMapping):
    """Yield (space, addr, role|None) in program order, including COPY destinations."""
    for inst in graph.instances.values():
        sp = mapping.space(graph, inst.name)
        for i in inst.body:
            if i.op in (Opcode.LD, Opcode.ST):
                yield sp, i.f0, None
            elif i.op is Opcode.COPY:
                yield sp, i.f0, None
                yield i.f2, i.f1, None
            else:
                for role, addr in _cal_roles(i):
                    yield sp, addr, role


def allocate_operands(graph: ExecutionGraph, mapping: PhysicalMapping, cfg: HardwareConfig) -> PhysicalMapping:
    nb, ne = cfg.opm_banks, cfg.opm_entries
    # first CAL role seen per operand wins; plain data movers have no preference
    role_of: dict[tuple[SpaceKey, int], int | None] = {}
    order: list[tuple[SpaceKey, int]] = []
    for sp, addr, role in _operand_uses(graph, mapping):
        key = (sp, addr)
        if key not in role_of:
            role_of[key] = role
            order.append(key)
        elif role_of[key] is None and role is not None:
            role_of[key] = role

    def pe_for_space(sp: SpaceKey) -> int:
        if isinstance(sp, tuple):
            return mapping.pe_of[sp[1]]
        return mapping.pe_of_logical[sp]

    for key in order:
        pe = pe_for_space(key[0])
        table = mapping.operands.setdefault(pe, {})
        load = mapping.bank_load.setdefault(pe, [0] * nb)
        role = role_of[key]
        candidates = [b for b in range(nb) if load[b] < ne]
        if not candidates:
            raise OperandCapacityExceeded(pe, "Operand RAM entries", len(table) + 1, nb * ne)
        if role is not None:
            preferred = [b for b in candidates if b % 3 == role]
            if preferred:
                candidates = preferred
        bank = min(candidates, key=lambda b: (load[b], b))
        table[key] = opm_address(bank, load[bank], cfg)
        load[bank] += 1
    return mapping


# -- PREREAD insertion -------------------------------------------------------


def read_ports(inst: Instruction) -> list[tuple[int, int]]:
    """(port, physical addr) pairs read from the Operand RAM by a CAL instruction."""
    if inst.op is Opcode.MADD:
        return [(0, inst.f0), (1, inst.f1), (2, inst.f2)]
    if inst.op in CAL_ARITH:
        return [(0, inst.f0), (1, inst.f1)]
    if inst.op is Opcode.PREREAD0:
        return [(0, inst.f0)]
    if inst.op is Opcode.PREREAD1:
        return [(1, inst.f1)]
    return []


def _conflicts(ports: Sequence[tuple[int, int]], cfg: HardwareConfig) -> bool:
    banks = [opm_bank(a, cfg) for _, a in ports]
    return len(set(banks)) != len(banks)


def insert_prereads(body: Sequence[Instruction], cfg: HardwareConfig) -> tuple[list[Instruction], list[int]]:
    """Return (new body, origin) where origin[i] is the index in ``body`` of the
    instruction that new-body entry i serves (prereads map to their consumer)."""
    out: list[Instruction] = []
    origin: list[int] = []
    for idx, inst in enumerate(body):
        if inst.op in CAL_ARITH:
            ports = read_ports(inst)
            if _conflicts(ports, cfg):
                others = [a for p, a in ports if p != 0]
                b0 = opm_bank(inst.f0, cfg)
                if any(opm_bank(a, cfg) == b0 for a in others):
                    out.append(Instruction(Opcode.PREREAD0, inst.f0, 0, 0))
                    origin.append(idx)
                    ports = [pa for pa in ports if pa[0] != 0]
                if _conflicts(ports, cfg):
                    out.append(Instruction(Opcode.PREREAD1, 0, inst.f1, 0))
                    origin.append(idx)
        out.append(inst)
        origin.append(idx)
    return out, origin


def residual_conflicts(body: Sequence[Instruction], cfg: HardwareConfig) -> list[int]:
    """Bank-arbiter check: indices of CAL instructions whose RAM reads collide in one cycle.

    Models the one-shot PreRead registers exactly as the CAL unit does."""
    pr: dict[int, int | None] = {0: None, 1: None}
    bad = []
    for i, inst in enumerate(body):
        if inst.stage is not Stage.CAL:
            continue
        ram_banks = []
        for port, addr in read_ports(inst):
            if inst.op in CAL_ARITH and port in pr and pr[port] == addr:
                pr[port] = None
                continue
            ram_banks.append(opm_bank(addr, cfg))
        if len(set(ram_banks)) != len(ram_banks):
            bad.append(i)
        if inst.op is Opcode.PREREAD0:
            pr[0] = inst.f0
        elif inst.op is Opcode.PREREAD1:
            pr[1] = inst.f1
    return bad


# -- artifacts ---------------------------------------------------------------


@dataclass(frozen=True)
class Descriptor:
    name: str
    pe: int
    slot: int
    priority: int
    task_id: int
    pred_count: int
    stage_start: tuple[int, int, int, int]
    stage_end: tuple[int, int, int, int]
    inst_dram_addr: int
    successors: tuple[tuple[int, int], ...]
    sparse: bool

    @property
    def n_insts(self) -> int:
        return self.stage_end[3] - self.stage_start[0]

    @property
    def iram_start(self) -> int:
        return self.stage_start[0]


@dataclass(frozen=True)
class TaskInfo:
    task_id: int
    name: str
    ld_base: int
    st_base: int
    iterations: int
    ld_stride: int
    st_stride: int


@dataclass(frozen=True)
class ControlRecord:
    time: int
    kind: str  # init | sparse | enable
    pe: int  # destination PE, -1 for broadcast
    payload: int


@dataclass
class Program:
    cfg: HardwareConfig
    descriptors: list[Descriptor]
    images: dict[str, list[Instruction]]
    tasks: list[TaskInfo]
    dram: dict[int, int]  # even byte address -> 16-bit value
    regions: dict[str, tuple[int, int]]  # name -> (base, size)
    outputs: list[str]
    script: list[ControlRecord]
    sparse_bits: dict[str, list[int]] = field(default_factory=dict)
    tables: dict[int, object] = field(default_factory=dict)  # lookup id -> 65536 uint16 array
    mapping: PhysicalMapping | None = None
    graph_name: str = ""

    def by_name(self) -> dict[str, Descriptor]:
        return {d.name: d for d in self.descriptors}

    def static_counts(self) -> dict[str, int]:
        counts = {"LD": 0, "CAL": 0, "COPY": 0, "ST": 0, "PREREAD": 0}
        for body in self.images.values():
            for i in body:
                if i.op is Opcode.COPY:
                    counts["COPY"] += 1
                elif i.stage is Stage.CAL:
                    counts["CAL"] += 1
                    if i.op in (Opcode.PREREAD0, Opcode.PREREAD1):
                        counts["PREREAD"] += 1
                else:
                    counts[i.op.name] += 1
        counts["ExeBlocks"] = len(self.descriptors)
        if self.mapping is not None:
            counts["OPM_entries"] = sum(len(t) for t in self.mapping.operands.values())
        return counts


def _stage_pcs(body: Sequence[Instruction], base: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    starts, ends = [], []
    pos = 0
    for s in Stage:
        starts.append(base + pos)
        while pos < len(body) and body[pos].stage is s:
            pos += 1
        ends.append(base + pos)
    return tuple(starts), tuple(ends)


def _physical_body(graph, mapping, name, cfg) -> list[Instruction]:
    inst = graph.instances[name]
    sp = mapping.space(graph, name)
    table = mapping.operands.get(mapping.pe_of[name], {})
    out = []
    for i in inst.body:
        if i.op in (Opcode.LD, Opcode.ST):
            out.append(Instruction(i.op, table[(sp, i.f0)], i.f1, i.f2, lookup_type=i.lookup_type))
        elif i.op is Opcode.COPY:
            dst_pe = mapping.pe_of_logical[i.f2]
            dst = mapping.operands[dst_pe][(i.f2, i.f1)]
            out.append(Instruction(Opcode.COPY, table[(sp, i.f0)], dst, dst_pe))
        elif i.op is Opcode.PREREAD0:
            out.append(Instruction(i.op, table[(sp, i.f0)], 0, 0))
        elif i.op is Opcode.PREREAD1:
            out.append(Instruction(i.op, 0, table[(sp, i.f1)], 0))
        else:
            out.append(
                Instruction(i.op, table[(sp, i.f0)], table[(sp, i.f1)], table[(sp, i.f2)])
            )
    return out


def emit(
    graph: ExecutionGraph,
    mapping: PhysicalMapping,
    cfg: HardwareConfig,
    sparse_bits: Mapping[str, Sequence[int]] | None = None,
    tables: Mapping[int, object] | None = None,
) -> Program:
    task_ids = {t.name: k for k, t in enumerate(graph.tasks)}
    preds = graph.predecessor_counts()
    succs = graph.successors()

    images: dict[str, list[Instruction]] = {}
    origins: dict[str, list[int]] = {}
    for name in graph.instances:
        phys = _physical_body(graph, mapping, name, cfg)
        body, origin = insert_prereads(phys, cfg)
        bad = residual_conflicts(body, cfg)
        if bad:
            raise ResidualConflict(f"{name}: residual CAL port conflicts at {bad[:5]}")
        images[name], origins[name] = body, origin

    # instruction RAM placement, in slot order per PE
    iram_cursor: dict[int, int] = defaultdict(int)
    iram_start: dict[str, int] = {}
    for name in graph.instances:
        pe = mapping.pe_of[name]
        iram_start[name] = iram_cursor[pe]
        iram_cursor[pe] += len(images[name])
        if iram_cursor[pe] > cfg.iram_capacity:
            raise CapacityExceeded(pe, "Instruction RAM words", iram_cursor[pe], cfg.iram_capacity)

    # DRAM: instructions packed per PE, then 4 KiB aligned regions
    dram: dict[int, int] = {}
    inst_addr: dict[str, int] = {}
    cursor = 0
    for pe in range(cfg.n_pes):
        for name in graph.instances:
            if mapping.pe_of[name] != pe:
                continue
            inst_addr[name] = cursor
            for inst in images[name]:
                w = encode(inst)
                for h in range(4):
                    dram[cursor + 2 * h] = (w >> (16 * h)) & 0xFFFF
                cursor += INST_BYTES
    regions: dict[str, tuple[int, int]] = {}
    for region in graph.regions.values():
        cursor = -(-cursor // REGION_ALIGN) * REGION_ALIGN
        regions[region.name] = (cursor, region.size)
        for off, val in region.data.items():
            dram[cursor + off] = val & 0xFFFF
        cursor += max(region.size, 1)
    if cursor > 0xFFFFFFFF:
        raise TranslationError("DRAM layout exceeds 32-bit address space")

    tasks = [
        TaskInfo(
            task_ids[t.name],
            t.name,
            regions[t.ld_base][0],
            regions[t.st_base][0],
            t.iterations,
            t.ld_stride,
            t.st_stride,
        )
        for t in graph.tasks
    ]

    descriptors = []
    for name, inst in graph.instances.items():
        starts, ends = _stage_pcs(images[name], iram_start[name])
        descriptors.append(
            Descriptor(
                name=name,
                pe=mapping.pe_of[name],
                slot=mapping.slot_of[name],
                priority=inst.priority,
                task_id=task_ids[inst.task],
                pred_count=preds[name],
                stage_start=starts,
                stage_end=ends,
                inst_dram_addr=inst_addr[name],
                successors=tuple((mapping.pe_of[s], mapping.slot_of[s]) for s in succs.get(name, [])),
                sparse=inst.sparse,
            )
        )

    # expand per-original-instruction bits onto the preread-augmented CAL stage;
    # sparse instances without a vector run dense
    bits_in = dict(sparse_bits or {})
    for name, inst in graph.instances.items():
        if inst.sparse and name not in bits_in:
            bits_in[name] = [1] * sum(1 for i in inst.body if i.stage is Stage.CAL)
    bits_out: dict[str, list[int]] = {}
    for name, bits in bits_in.items():
        body, origin = images[name], origins[name]
        orig_cal = [k for k, i in enumerate(graph.instances[name].body) if i.stage is Stage.CAL]
        pos_of = {k: j for j, k in enumerate(orig_cal)}
        if len(bits) != len(orig_cal):
            raise TranslationError(f"{name}: {len(bits)} sparse bits for {len(orig_cal)} CAL instructions")
        bits_out[name] = [bits[pos_of[origin[j]]] for j, i in enumerate(body) if i.stage is Stage.CAL]
        bits_out[name] = bridge_skips(bits_out[name])

    script = control_script(descriptors, bits_out, tasks, cfg)
    return Program(
        cfg=cfg,
        descriptors=descriptors,
        images=images,
        tasks=tasks,
        dram=dram,
        regions=regions,
        outputs=list(graph.outputs),
        script=script,
        sparse_bits=bits_out,
        tables=dict(tables or {}),
        mapping=mapping,
    )


# -- sparse vectors ----------------------------------------------------------

MAX_SKIP = 255


def skip_increments(bits: Sequence[int]) -> list[int]:
    """Sparse PC Inc for each set bit: distance to the next set bit or to the stage end."""
    incs = [0] * len(bits)
    nxt = len(bits)
    for k in range(len(bits) - 1, -1, -1):
        if bits[k]:
            incs[k] = nxt - k
            nxt = k
    return incs


def check_skips(bits: Sequence[int]) -> None:
    incs = skip_increments(bits)
    first = next((k for k, b in enumerate(bits) if b), len(bits))
    if first > MAX_SKIP or any(v > MAX_SKIP for v in incs):
        raise SkipDistanceOverflow("pruned run longer than 255 instructions")


def bridge_skips(bits: Sequence[int]) -> list[int]:
    """Keep the last instruction of every 255-long pruned run live."""
    out = list(bits)
    run = 0
    for k, b in enumerate(out):
        if b:
            run = 0
            continue
        run += 1
        if run == MAX_SKIP:
            out[k] = 1
            run = 0
    return out


def compute_sparse_vectors(
    graph: ExecutionGraph,
    pruned: Mapping[SpaceKey, Iterable[int]],
    *,
    bridge: bool = True,
) -> dict[str, list[int]]:
    """One bit per CAL instruction of each sparse instance.

    ``pruned`` maps a logical operand space (logical PE id) to the set of logical
    Operand-RAM addresses holding ineffectual weights.  A MADD is cleared iff its
    weight operand (f0) is pruned; every other instruction stays live."""
    pruned_sets = {k: set(v) for k, v in pruned.items()}
    out = {}
    for inst in graph.instances.values():
        if not inst.sparse:
            continue
        sp = inst.logical_pe if inst.logical_pe is not None else ("inst", inst.name)
        dead = pruned_sets.get(sp, set())
        bits = [
            0 if (i.op is Opcode.MADD and i.f0 in dead) else 1
            for i in inst.body
            if i.stage is Stage.CAL
        ]
        if bridge:
            bits = bridge_skips(bits)
        else:
            check_skips(bits)
        out[inst.name] = bits
    return out


# -- control-message encoding (85-bit Control NoC payloads) ------------------

CTRL_BITS = 85
PC_BITS = 12


def _pack(fields: Sequence[tuple[int, int]]) -> int:
    word, shift = 0, 0
    for value, width in fields:
        if not 0 <= value < 1 << width:
            raise ValueError(f"value {value} does not fit {width} bits")
        word |= value << shift
        shift += width
    assert shift <= CTRL_BITS
    return word


def _unpack(word: int, widths: Sequence[int]) -> list[int]:
    out = []
    for w in widths:
        out.append(word & ((1 << w) - 1))
        word >>= w
    return out


# init fragment: slot 5 | frag 3 | data 77
def init_fragments(d: Descriptor) -> list[int]:
    succ = list(d.successors) + [(0, 0)] * (3 - len(d.successors))
    valid = [1] * len(d.successors) + [0] * (3 - len(d.successors))
    frags = [
        [(d.priority, 16), (d.task_id, 8), (d.pred_count, 8), (int(d.sparse), 1), (d.inst_dram_addr, 32)],
        [(pc, PC_BITS) for pc in d.stage_start],
        [(pc, PC_BITS) for pc in d.stage_end],
        [(succ[0][0], 16), (succ[0][1], 8), (valid[0], 1), (succ[1][0], 16), (succ[1][1], 8), (valid[1], 1)],
        [(succ[2][0], 16), (succ[2][1], 8), (valid[2], 1)],
    ]
    return [_pack([(d.slot, 5), (k, 3)] + f) for k, f in enumerate(frags)]


_FRAG_WIDTHS = [
    [16, 8, 8, 1, 32],
    [PC_BITS] * 4,
    [PC_BITS] * 4,
    [16, 8, 1, 16, 8, 1],
    [16, 8, 1],
]


def decode_fragment(word: int) -> tuple[int, int, list[int]]:
    slot, frag = _unpack(word, [5, 3])
    return slot, frag, _unpack(word >> 8, _FRAG_WIDTHS[frag])


def assemble_descriptor(pe: int, name: str, frags: Mapping[int, list[int]]) -> Descriptor:
    prio, task, preds, sparse, addr = frags[0]
    s0, s1, s2 = frags[3][0:3], frags[3][3:6], frags[4]
    successors = tuple((p, s) for p, s, v in (s0, s1, s2) if v)
    return Descriptor(
        name=name,
        pe=pe,
        slot=-1,
        priority=prio,
        task_id=task,
        pred_count=preds,
        stage_start=tuple(frags[1]),
        stage_end=tuple(frags[2]),
        inst_dram_addr=addr,
        successors=successors,
        sparse=bool(sparse),
    )


SPARSE_CHUNK = 64
SPARSE_IDX_BITS = 6  # 4096-word IRAM / 64-bit chunks


def sparse_chunks(slot: int, bits: Sequence[int]) -> list[int]:
    out = []
    for k in range(0, max(len(bits), 1), SPARSE_CHUNK):
        chunk = bits[k : k + SPARSE_CHUNK]
        val = sum(b << j for j, b in enumerate(chunk))
        out.append(_pack([(slot, 5), (k // SPARSE_CHUNK, SPARSE_IDX_BITS), (len(chunk), 7), (val, SPARSE_CHUNK)]))
    return out


def decode_sparse_chunk(word: int) -> tuple[int, int, list[int]]:
    slot, idx, n, val = _unpack(word, [5, SPARSE_IDX_BITS, 7, SPARSE_CHUNK])
    return slot, idx, [(val >> j) & 1 for j in range(n)]


def enable_payload(task_id: int, ld_base: int, st_base: int) -> int:
    return _pack([(task_id, 8), (ld_base, 32), (st_base, 32)])


def decode_enable(word: int) -> tuple[int, int, int]:
    t, ld, st = _unpack(word, [8, 32, 32])
    return t, ld, st


def control_script(
    descriptors: Sequence[Descriptor],
    sparse_bits: Mapping[str, Sequence[int]],
    tasks: Sequence[TaskInfo],
    cfg: HardwareConfig,
) -> list[ControlRecord]:
    """Initial host messages, one per time slot.  Later task enables are issued
    by the host at run time as completions arrive."""
    script = []
    t = 0
    for d in descriptors:
        for frag in init_fragments(d):
            script.append(ControlRecord(t, "init", d.pe, frag))
            t += 1
    for d in descriptors:
        if d.name in sparse_bits:
            for chunk in sparse_chunks(d.slot, sparse_bits[d.name]):
                script.append(ControlRecord(t, "sparse", d.pe, chunk))
                t += 1
    if tasks:
        first = tasks[0]
        script.append(ControlRecord(t, "enable", -1, enable_payload(first.task_id, first.ld_base, first.st_base)))
    return script


# -- driver ------------------------------------------------------------------


def translate(
    graph: ExecutionGraph,
    cfg: HardwareConfig,
    *,
    sparse_bits: Mapping[str, Sequence[int]] | None = None,
    tables: Mapping[int, object] | None = None,
    validate: bool = True,
) -> Program:
    if validate:
        diags = validate_graph(graph)
        if diags:
            head = "; ".join(f"{d.kind}({d.subject}): {d.message}" for d in diags[:5])
            raise GraphError(f"graph failed validation: {head}")
    mapping = place(graph, cfg)
    allocate_operands(graph, mapping, cfg)
    return emit(graph, mapping, cfg, sparse_bits=sparse_bits, tables=tables)
