"""Programming model: ExeBlock classes, bound instances, tasks and execution graphs.

Class bodies are instruction templates.  An operand field is either an integer
literal or a parameter reference with an optional constant offset:

* ``$name+k``  logical Operand-RAM address
* ``@name+k``  logical DRAM offset (fills f1/f2 of LD and ST)
* ``%name``    logical PE id (f2 of COPY)

The declarative text format is documented in ``docs/graph_format.md``.
"""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

from .isa import (
    AsmSyntaxError,
    Instruction,
    Opcode,
    Stage,
    STAGE_OF,
    StageOrderError,
    check_stage_order,
    split_offset,
)

MAX_SUCCESSORS = 3


class GraphError(Exception):
    pass


class UnboundParameter(GraphError):
    pass


class TypeMismatch(GraphError):
    pass


class GraphSyntaxError(GraphError):
    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")


# -- typed binding values ----------------------------------------------------


class Opm(NamedTuple):
    addr: int


class Dram(NamedTuple):
    offset: int


class Pe(NamedTuple):
    pe: int


_KIND_OF_SIGIL = {"$": Opm, "@": Dram, "%": Pe}
_SIGIL_OF_KIND = {v: k for k, v in _KIND_OF_SIGIL.items()}


@dataclass(frozen=True)
class ParamRef:
    kind: type  # Opm, Dram or Pe
    name: str
    offset: int = 0

    def __str__(self) -> str:
        s = f"{_SIGIL_OF_KIND[self.kind]}{self.name}"
        return s + (f"+{self.offset}" if self.offset else "")


Operand = int | ParamRef


@dataclass(frozen=True)
class TemplateInst:
    """One templated instruction.  LD/ST carry (opm, dram) operands."""

    op: Opcode
    operands: tuple[Operand, ...]
    lookup_type: int = 0

    @property
    def stage(self) -> Stage:
        return STAGE_OF[self.op]

    def __str__(self) -> str:
        s = f"{self.op.name} " + ", ".join(str(o) for o in self.operands)
        return s + (f", lookup={self.lookup_type}" if self.lookup_type else "")


# expected kind per operand position
def _expected_kinds(op: Opcode, n: int) -> tuple[type, ...]:
    if op in (Opcode.LD, Opcode.ST):
        return (Opm, Dram) if n == 2 else (Opm, int, int)
    if op is Opcode.COPY:
        return (Opm, Opm, Pe)
    return (Opm, Opm, Opm)


@dataclass
class ExeBlockClass:
    name: str
    body: list[TemplateInst]

    def __post_init__(self):
        for t in self.body:
            n = len(t.operands)
            if t.op in (Opcode.LD, Opcode.ST):
                if n not in (2, 3):
                    raise GraphError(f"{self.name}: {t.op.name} takes 2 or 3 operands")
            elif n != 3:
                raise GraphError(f"{self.name}: {t.op.name} takes 3 operands")
            for pos, (opnd, kind) in enumerate(zip(t.operands, _expected_kinds(t.op, n))):
                if isinstance(opnd, ParamRef) and opnd.kind is not kind:
                    raise TypeMismatch(
                        f"{self.name}: {t} operand {pos} must be {kind.__name__}"
                    )
        last = Stage.LD
        for t in self.body:
            if t.stage < last:
                raise StageOrderError(f"class {self.name}: {t.op.name} after stage {last.name}")
            last = t.stage

    @property
    def params(self) -> dict[str, type]:
        out: dict[str, type] = {}
        for t in self.body:
            for o in t.operands:
                if isinstance(o, ParamRef):
                    out.setdefault(o.name, o.kind)
        return out


def _resolve(opnd: Operand, bindings: Mapping[str, object], cls: str) -> int:
    if isinstance(opnd, int):
        return opnd
    try:
        val = bindings[opnd.name]
    except KeyError:
        raise UnboundParameter(f"{cls}: parameter {opnd.name!r} is not bound") from None
    if isinstance(val, (Opm, Dram, Pe)):
        if type(val) is not opnd.kind:
            raise TypeMismatch(
                f"{cls}: {opnd.name!r} bound to {type(val).__name__}, expected {opnd.kind.__name__}"
            )
        val = val[0]
    return int(val) + opnd.offset


def expand(cls: ExeBlockClass, bindings: Mapping[str, object]) -> list[Instruction]:
    out = []
    for t in cls.body:
        vals = [_resolve(o, bindings, cls.name) for o in t.operands]
        if len(vals) == 2:
            hi, lo = split_offset(vals[1])
            vals = [vals[0], hi, lo]
        out.append(Instruction(t.op, *vals, lookup_type=t.lookup_type))
    return out


@dataclass
class ExeBlockInstance:
    name: str
    cls: ExeBlockClass
    bindings: dict[str, object]
    task: str
    logical_pe: int | None = None
    priority: int | None = None
    sparse: bool = False
    body: list[Instruction] = field(default_factory=list)

    def stage_ranges(self) -> dict[Stage, tuple[int, int]]:
        """[start, end) instruction index per stage."""
        ranges = {}
        pos = 0
        for s in Stage:
            start = pos
            while pos < len(self.body) and self.body[pos].stage is s:
                pos += 1
            ranges[s] = (start, pos)
        return ranges


def instantiate(
    cls: ExeBlockClass,
    bindings: Mapping[str, object],
    *,
    name: str,
    task: str = "main",
    logical_pe: int | None = None,
    priority: int | None = None,
    sparse: bool = False,
) -> ExeBlockInstance:
    missing = set(cls.params) - set(bindings)
    if missing:
        raise UnboundParameter(f"{cls.name}: unbound parameter(s) {sorted(missing)}")
    body = expand(cls, bindings)
    return ExeBlockInstance(name, cls, dict(bindings), task, logical_pe, priority, sparse, body)


@dataclass
class Region:
    name: str
    size: int  # bytes
    data: dict[int, int] = field(default_factory=dict)  # byte offset -> 16-bit value, little-endian halves


@dataclass
class Task:
    name: str
    ld_base: str
    st_base: str
    iterations: int = 1
    ld_stride: int = 0
    st_stride: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise GraphError(f"task {self.name}: iterations must be >= 1")


@dataclass
class ExecutionGraph:
    classes: dict[str, ExeBlockClass] = field(default_factory=dict)
    instances: dict[str, ExeBlockInstance] = field(default_factory=dict)
    edges: list[tuple[str, str]] = field(default_factory=list)
    tasks: list[Task] = field(default_factory=list)
    regions: dict[str, Region] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)  # regions read back by the host

    # -- construction helpers
    def add_class(self, cls: ExeBlockClass) -> ExeBlockClass:
        if cls.name in self.classes and self.classes[cls.name] is not cls:
            raise GraphError(f"duplicate class {cls.name}")
        self.classes[cls.name] = cls
        return cls

    def add_instance(self, inst: ExeBlockInstance) -> ExeBlockInstance:
        if inst.name in self.instances:
            raise GraphError(f"duplicate instance {inst.name}")
        self.add_class(inst.cls)
        if inst.priority is None:
            inst.priority = len(self.instances)
        self.instances[inst.name] = inst
        return inst

    def add_edge(self, src: str, dst: str) -> None:
        self.edges.append((src, dst))

    def add_region(self, region: Region) -> Region:
        self.regions[region.name] = region
        return region

    def task(self, name: str) -> Task:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(name)

    # -- derived structure
    def successors(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for a, b in self.edges:
            out[a].append(b)
        return out

    def predecessor_counts(self) -> dict[str, int]:
        cnt = {n: 0 for n in self.instances}
        for _, b in self.edges:
            if b in cnt:
                cnt[b] += 1
        return cnt

    def members(self, task: str) -> list[ExeBlockInstance]:
        return [i for i in self.instances.values() if i.task == task]

    def logical_pes(self) -> set[int]:
        return {i.logical_pe for i in self.instances.values() if i.logical_pe is not None}


# -- validation ---------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    kind: str
    subject: str
    message: str


def _find_cycle(nodes: Iterable[str], succ: Mapping[str, Sequence[str]]) -> list[str] | None:
    WHITE, GREY, BLACK = 0, 1, 2
    color = {n: WHITE for n in nodes}
    for root in color:
        if color[root] != WHITE:
            continue
        stack = [(root, iter(succ.get(root, ())))]
        path = [root]
        color[root] = GREY
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                path.pop()
                color[node] = BLACK
            elif color.get(nxt) == GREY:
                return path[path.index(nxt):] + [nxt]
            elif color.get(nxt) == WHITE:
                color[nxt] = GREY
                path.append(nxt)
                stack.append((nxt, iter(succ.get(nxt, ()))))
    return None


def validate_graph(graph: ExecutionGraph) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    task_names = [t.name for t in graph.tasks]
    if len(set(task_names)) != len(task_names):
        diags.append(Diagnostic("DuplicateTask", ",".join(task_names), "task names must be unique"))
    for t in graph.tasks:
        for region in (t.ld_base, t.st_base):
            if region not in graph.regions:
                diags.append(Diagnostic("UnknownRegion", t.name, f"region {region!r} undefined"))

    for inst in graph.instances.values():
        if inst.task not in task_names:
            diags.append(Diagnostic("UnknownTask", inst.name, f"task {inst.task!r} undefined"))
        try:
            check_stage_order(inst.body)
        except StageOrderError as exc:
            diags.append(Diagnostic("StageOrder", inst.name, str(exc)))

    succ = graph.successors()
    for name, outs in sorted(succ.items()):
        if len(outs) > MAX_SUCCESSORS:
            diags.append(
                Diagnostic("TooManySuccessors", name, f"{len(outs)} successors (max {MAX_SUCCESSORS})")
            )
    for a, b in graph.edges:
        if a not in graph.instances or b not in graph.instances:
            diags.append(Diagnostic("UnknownInstance", f"{a}->{b}", "edge endpoint undefined"))
            continue
        if graph.instances[a].task != graph.instances[b].task:
            diags.append(Diagnostic("CrossTaskEdge", f"{a}->{b}", "edges must stay within a task"))

    for tname in task_names:
        nodes = [i.name for i in graph.members(tname)]
        cycle = _find_cycle(nodes, succ)
        if cycle:
            diags.append(Diagnostic("CycleDetected", tname, " -> ".join(cycle)))

    pes = graph.logical_pes()
    for inst in graph.instances.values():
        for i in inst.body:
            if i.op is Opcode.COPY and i.f2 not in pes:
                diags.append(
                    Diagnostic("UnknownCopyTarget", inst.name, f"COPY targets logical PE {i.f2}")
                )
                break
    return diags


# -- text format ---------------------------------------------------------------

_REF = re.compile(r"^([$@%])([A-Za-z_][A-Za-z0-9_]*)(?:\+(\w+))?$")


def _parse_operand(tok: str, where: str) -> Operand:
    tok = tok.strip()
    m = _REF.match(tok)
    if m:
        sigil, name, off = m.groups()
        return ParamRef(_KIND_OF_SIGIL[sigil], name, int(off, 0) if off else 0)
    try:
        return int(tok, 0)
    except ValueError:
        raise GraphSyntaxError(where, f"bad operand {tok!r}") from None


def parse_template(line: str, where: str) -> TemplateInst:
    body = line.split("#", 1)[0].strip()
    mnemonic, _, rest = body.partition(" ")
    try:
        op = Opcode[mnemonic.upper()]
    except KeyError:
        raise GraphSyntaxError(where, f"unknown mnemonic {mnemonic!r}") from None
    lookup = 0
    operands = []
    for part in rest.split(","):
        part = part.strip()
        if part.lower().startswith("lookup="):
            lookup = int(part.split("=", 1)[1], 0)
        elif part:
            operands.append(_parse_operand(part, where))
    return TemplateInst(op, tuple(operands), lookup)


def _parse_value(tok: str) -> object:
    if tok[0] in _KIND_OF_SIGIL:
        return _KIND_OF_SIGIL[tok[0]](int(tok[1:], 0))
    return int(tok, 0)


def _kv(tokens: Sequence[str], where: str) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise GraphSyntaxError(where, f"expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def parse_graph(text: str, *, source: str = "<string>", base_dir: Path | None = None) -> ExecutionGraph:
    graph = ExecutionGraph()
    _parse_into(graph, text, source, base_dir or Path.cwd(), set())
    return graph


def load_graph(path: str | Path) -> ExecutionGraph:
    path = Path(path)
    return parse_graph(path.read_text(), source=str(path), base_dir=path.parent)


def _parse_into(graph, text, source, base_dir, seen):
    lines = text.splitlines()
    i = 0
    pending: list[tuple[str, str, dict[str, str], str]] = []
    while i < len(lines):
        where = f"{source}:{i + 1}"
        raw = lines[i].split("#", 1)[0].strip()
        i += 1
        if not raw:
            continue
        head, *rest = raw.split()
        if head == "include":
            inc = (base_dir / rest[0]).resolve()
            if inc in seen:
                continue
            seen.add(inc)
            _parse_into(graph, inc.read_text(), str(inc), inc.parent, seen)
        elif head == "class":
            name = rest[0]
            body = []
            while True:
                if i >= len(lines):
                    raise GraphSyntaxError(where, f"class {name} missing 'end'")
                line = lines[i].split("#", 1)[0].strip()
                i += 1
                if line == "end":
                    break
                if line:
                    body.append(parse_template(line, f"{source}:{i}"))
            graph.add_class(ExeBlockClass(name, body))
        elif head == "region":
            region = graph.add_region(Region(rest[0], int(rest[1], 0)))
            for tok in rest[2:]:
                k, v = tok.split("=", 1)
                if k == "output" and v == "1":
                    graph.outputs.append(region.name)
        elif head == "data":
            # data REGION OFFSET v0 v1 ...   (16-bit values at consecutive 2-byte slots)
            region = graph.regions[rest[0]]
            off = int(rest[1], 0)
            for k, v in enumerate(rest[2:]):
                region.data[off + 2 * k] = int(v, 0) & 0xFFFF
        elif head == "instance":
            pending.append((rest[0], rest[1], _kv(rest[2:], where), where))
        elif head == "edge":
            graph.add_edge(rest[0], rest[1])
        elif head == "task":
            kv = _kv(rest[1:], where)
            graph.tasks.append(
                Task(
                    rest[0],
                    kv["ld"],
                    kv["st"],
                    int(kv.get("iter", "1"), 0),
                    int(kv.get("ldstride", "0"), 0),
                    int(kv.get("ststride", "0"), 0),
                )
            )
        else:
            raise GraphSyntaxError(where, f"unknown directive {head!r}")
    for name, cls_name, kv, where in pending:
        try:
            cls = graph.classes[cls_name]
        except KeyError:
            raise GraphSyntaxError(where, f"unknown class {cls_name!r}") from None
        meta = {k: kv.pop(k) for k in ("pe", "prio", "sparse", "task") if k in kv}
        bindings = {k: _parse_value(v) for k, v in kv.items()}
        graph.add_instance(
            instantiate(
                cls,
                bindings,
                name=name,
                task=meta.get("task", "main"),
                logical_pe=int(meta["pe"], 0) if "pe" in meta else None,
                priority=int(meta["prio"], 0) if "prio" in meta else None,
                sparse=meta.get("sparse", "0") == "1",
            )
        )


def _fmt_value(v: object) -> str:
    if isinstance(v, (Opm, Dram, Pe)):
        return f"{_SIGIL_OF_KIND[type(v)]}{v[0]}"
    return str(v)


def dump_graph(graph: ExecutionGraph) -> str:
    out = []
    for r in graph.regions.values():
        flag = " output=1" if r.name in graph.outputs else ""
        out.append(f"region {r.name} {r.size}{flag}")
        items = sorted(r.data.items())
        k = 0
        while k < len(items):
            start = items[k][0]
            vals = [items[k][1]]
            k += 1
            while k < len(items) and items[k][0] == start + 2 * len(vals) and len(vals) < 16:
                vals.append(items[k][1])
                k += 1
            out.append(f"data {r.name} {start} " + " ".join(str(v) for v in vals))
    for c in graph.classes.values():
        out.append(f"class {c.name}")
        out.extend(f"  {t}" for t in c.body)
        out.append("end")
    for t in graph.tasks:
        out.append(
            f"task {t.name} ld={t.ld_base} st={t.st_base} iter={t.iterations}"
            f" ldstride={t.ld_stride} ststride={t.st_stride}"
        )
    for inst in graph.instances.values():
        parts = [f"instance {inst.name} {inst.cls.name} task={inst.task}"]
        if inst.logical_pe is not None:
            parts.append(f"pe={inst.logical_pe}")
        parts.append(f"prio={inst.priority}")
        if inst.sparse:
            parts.append("sparse=1")
        parts.extend(f"{k}={_fmt_value(v)}" for k, v in inst.bindings.items())
        out.append(" ".join(parts))
    for a, b in graph.edges:
        out.append(f"edge {a} {b}")
    return "\n".join(out) + "\n"
